//! Summed multi-task loss: L1 on age plus binary cross-entropy on the sex and
//! diagnosis logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadOutputs;
use crate::nn::Scalar;

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before the cross-entropy.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_age: f64,
    pub l_sex: f64,
    pub l_dx: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_age: f64, l_sex: f64, l_dx: f64) -> Self {
        Self {
            l_age,
            l_sex,
            l_dx,
            l_total: l_age + l_sex + l_dx,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_age.is_finite() && self.l_sex.is_finite() && self.l_dx.is_finite() && self.l_total.is_finite()
    }

    /// Adds another breakdown term by term.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_age += other.l_age;
        self.l_sex += other.l_sex;
        self.l_dx += other.l_dx;
        self.l_total += other.l_total;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            l_age: self.l_age * factor,
            l_sex: self.l_sex * factor,
            l_dx: self.l_dx * factor,
            l_total: self.l_total * factor,
        }
    }
}

/// Which terms enter the optimized loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Age + sex + diagnosis.
    MultiTask,
    /// Sex cross-entropy only (proxy pretraining).
    SexOnly,
}

/// Per-sample regression and classification targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets {
    pub age: Vec<f64>,
    /// 1 = male.
    pub sex: Vec<f64>,
    /// 1 = patient.
    pub dx: Vec<f64>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.age.len()
    }

    pub fn is_empty(&self) -> bool {
        self.age.is_empty()
    }

    pub fn push(&mut self, age: f64, sex: f64, dx: f64) {
        self.age.push(age);
        self.sex.push(sex);
        self.dx.push(dx);
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of label `y` given logit `z`, with `z` clamped to ±30.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn check_inputs(pred: [&[f64]; 3], truth: [&[f64]; 3]) -> Result<()> {
    let n = pred[0].len();
    if pred.iter().chain(&truth).any(|s| s.len() != n) {
        return Err(Error::InvalidInput(format!(
            "loss inputs differ in length: predictions {:?}, targets {:?}",
            pred.map(<[f64]>::len),
            truth.map(<[f64]>::len)
        )));
    }
    for (name, s) in [("age prediction", pred[0]), ("sex logit", pred[1]), ("dx logit", pred[2])] {
        if let Some(v) = s.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} ({v})")));
        }
    }
    if let Some(v) = truth[0].iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("age target ({v})")));
    }
    for (name, s) in [("sex", truth[1]), ("dx", truth[2])] {
        if let Some(v) = s.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput(format!("{name} label {v} is not 0 or 1")));
        }
    }
    Ok(())
}

/// Summed L1 age loss and summed cross-entropies over a batch.
pub fn multitask_loss(
    age_pred: &[f64],
    sex_logit: &[f64],
    dx_logit: &[f64],
    age_true: &[f64],
    sex_true: &[f64],
    dx_true: &[f64],
) -> Result<LossBreakdown> {
    check_inputs([age_pred, sex_logit, dx_logit], [age_true, sex_true, dx_true])?;
    let l_age = age_pred.iter().zip(age_true).map(|(p, t)| (t - p).abs()).sum();
    let l_sex = sex_logit.iter().zip(sex_true).map(|(&z, &y)| bce_with_logits(z, y)).sum();
    let l_dx = dx_logit.iter().zip(dx_true).map(|(&z, &y)| bce_with_logits(z, y)).sum();
    Ok(LossBreakdown::new(l_age, l_sex, l_dx))
}

/// Loss of model outputs against targets plus its gradient with respect to each output.
///
/// The L1 subgradient at zero residual is 0. Past the logit clamp the
/// cross-entropy gradient stays `sigmoid(z) - y`, so saturated mistakes still
/// receive a corrective signal.
pub fn loss_and_grad<T: Scalar>(
    out: &HeadOutputs<T>,
    targets: &Targets,
    objective: Objective,
) -> Result<(LossBreakdown, HeadOutputs<T>)> {
    let to64 = |v: &[T]| v.iter().map(|x| x.f64()).collect::<Vec<f64>>();
    let (age, sex, dx) = (to64(&out.age), to64(&out.sex_logit), to64(&out.dx_logit));
    let full = multitask_loss(&age, &sex, &dx, &targets.age, &targets.sex, &targets.dx)?;
    let mut grad = HeadOutputs::zeros(out.len());
    for i in 0..out.len() {
        let zs = sex[i].clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        grad.sex_logit[i] = T::of(sigmoid(zs) - targets.sex[i]);
        if objective == Objective::MultiTask {
            let r = age[i] - targets.age[i];
            grad.age[i] = T::of(if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            });
            let zd = dx[i].clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            grad.dx_logit[i] = T::of(sigmoid(zd) - targets.dx[i]);
        }
    }
    let loss = match objective {
        Objective::MultiTask => full,
        Objective::SexOnly => LossBreakdown::new(0.0, full.l_sex, 0.0),
    };
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_example() {
        let l = multitask_loss(&[58.0], &[0.0], &[0.0], &[60.0], &[1.0], &[0.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((l.l_age - 2.0).abs() < 1e-12);
        assert!((l.l_sex - ln2).abs() < 1e-12);
        assert!((l.l_dx - ln2).abs() < 1e-12);
        assert!((l.l_total - (2.0 + 2.0 * ln2)).abs() < 1e-12);
        assert!((l.l_total - 3.3863).abs() < 1e-4);
    }

    #[test]
    fn saturated_correct_logits_give_near_zero_loss() {
        let l = multitask_loss(&[70.0, 50.0], &[1e6, -1e6], &[-1e6, 1e6], &[70.0, 50.0], &[1.0, 0.0], &[0.0, 1.0])
            .unwrap();
        assert_eq!(l.l_age, 0.0);
        assert!(l.l_total < 1e-12);
    }

    #[test]
    fn duplicating_the_batch_doubles_each_term() {
        let a = multitask_loss(&[40.0, 71.0], &[0.3, -2.0], &[1.5, -0.2], &[45.0, 70.0], &[1.0, 0.0], &[1.0, 1.0])
            .unwrap();
        let b = multitask_loss(
            &[40.0, 71.0, 40.0, 71.0],
            &[0.3, -2.0, 0.3, -2.0],
            &[1.5, -0.2, 1.5, -0.2],
            &[45.0, 70.0, 45.0, 70.0],
            &[1.0, 0.0, 1.0, 0.0],
            &[1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        for (x, y) in [(a.l_age, b.l_age), (a.l_sex, b.l_sex), (a.l_dx, b.l_dx), (a.l_total, b.l_total)] {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(multitask_loss(&[1.0], &[0.0], &[0.0], &[1.0], &[0.5], &[0.0]).is_err());
        assert!(multitask_loss(&[1.0], &[0.0], &[0.0], &[1.0], &[1.0], &[2.0]).is_err());
        assert!(multitask_loss(&[f64::NAN], &[0.0], &[0.0], &[1.0], &[1.0], &[0.0]).is_err());
        assert!(multitask_loss(&[1.0], &[f64::INFINITY], &[0.0], &[1.0], &[1.0], &[0.0]).is_err());
        assert!(multitask_loss(&[1.0, 2.0], &[0.0], &[0.0], &[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let out = HeadOutputs {
            age: vec![58.3, 71.2, 40.0],
            sex_logit: vec![0.4, -1.3, 2.2],
            dx_logit: vec![-0.7, 0.05, 3.1],
        };
        let t = Targets {
            age: vec![60.0, 70.0, 45.5],
            sex: vec![1.0, 0.0, 0.0],
            dx: vec![0.0, 1.0, 1.0],
        };
        let (_, g) = loss_and_grad(&out, &t, Objective::MultiTask).unwrap();
        let total = |o: &HeadOutputs<f64>| loss_and_grad(o, &t, Objective::MultiTask).unwrap().0.l_total;
        let h = 1e-6;
        for head in 0..3 {
            for i in 0..3 {
                let bump = |d: f64| {
                    let mut o = out.clone();
                    [&mut o.age, &mut o.sex_logit, &mut o.dx_logit][head][i] += d;
                    total(&o)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = [&g.age, &g.sex_logit, &g.dx_logit][head][i];
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4) < 1e-4, "head {head} sample {i}");
            }
        }
    }

    #[test]
    fn sex_only_objective_ignores_other_heads() {
        let out: HeadOutputs<f64> = HeadOutputs {
            age: vec![10.0],
            sex_logit: vec![0.0],
            dx_logit: vec![5.0],
        };
        let t = Targets {
            age: vec![60.0],
            sex: vec![1.0],
            dx: vec![0.0],
        };
        let (l, g) = loss_and_grad(&out, &t, Objective::SexOnly).unwrap();
        assert_eq!(l.l_total, l.l_sex);
        assert_eq!((l.l_age, l.l_dx), (0.0, 0.0));
        assert_eq!((g.age[0], g.dx_logit[0]), (0.0, 0.0));
        assert!((g.sex_logit[0] + 0.5).abs() < 1e-12);
    }
}
