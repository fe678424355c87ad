use serde::{Deserialize, Serialize};

use crate::nn::{Grads, ParamStore, Scalar};

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Decoupled weight decay used by AdamW.
pub const ADAMW_WEIGHT_DECAY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamw,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::Adamw];

    pub fn label(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adamw => "adamw",
        }
    }
}

/// First-order optimizer whose moment buffers mirror the parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore<T>) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![T::zero(); e.data.len()]).collect();
        let v = match kind {
            OptimizerKind::Sgd => Vec::new(),
            _ => zeros(),
        };
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let lr = T::of(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                let mu = T::of(SGD_MOMENTUM);
                for ((entry, g), m) in params.entries_mut().iter_mut().zip(&grads.data).zip(&mut self.m) {
                    for ((p, &g), m) in entry.data.iter_mut().zip(g).zip(m.iter_mut()) {
                        *m = mu * *m + g;
                        *p -= lr * *m;
                    }
                }
            }
            OptimizerKind::Adam | OptimizerKind::Adamw => {
                let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
                let t = self.step as i32;
                let c1 = T::of(1.0 / (1.0 - ADAM_BETA1.powi(t)));
                let c2 = T::of(1.0 / (1.0 - ADAM_BETA2.powi(t)));
                let eps = T::of(ADAM_EPS);
                let decay = match self.kind {
                    OptimizerKind::Adamw => T::one() - lr * T::of(ADAMW_WEIGHT_DECAY),
                    _ => T::one(),
                };
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                for (((entry, g), m), v) in params
                    .entries_mut()
                    .iter_mut()
                    .zip(&grads.data)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for (((p, &g), m), v) in entry.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + one_b1 * g;
                        *v = b2 * *v + one_b2 * g * g;
                        *p = *p * decay - lr * (*m * c1) / ((*v * c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", vec![2], vec![3.0, -2.0]);
        s
    }

    fn grads_of(s: &ParamStore<f64>) -> Grads<f64> {
        // Gradient of 0.5 * |w|^2.
        Grads {
            data: vec![s.entries()[0].data.clone()],
        }
    }

    #[test]
    fn every_optimizer_descends_a_quadratic() {
        for kind in OptimizerKind::ALL {
            let mut s = quadratic_store();
            let mut opt = Optimizer::new(kind, 0.05, &s);
            for _ in 0..300 {
                let g = grads_of(&s);
                opt.step(&mut s, &g);
            }
            let norm: f64 = s.entries()[0].data.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 0.1, "{kind:?} ended at {norm}");
        }
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut s = quadratic_store();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &s);
        let g = grads_of(&s);
        opt.step(&mut s, &g);
        let w = &s.entries()[0].data;
        assert!((w[0] - (3.0 - 0.01)).abs() < 1e-8);
        assert!((w[1] - (-2.0 + 0.01)).abs() < 1e-8);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        for kind in OptimizerKind::ALL {
            let mut s = quadratic_store();
            let before = s.clone();
            let mut opt = Optimizer::new(kind, 0.0, &s);
            let g = grads_of(&s);
            opt.step(&mut s, &g);
            assert_eq!(s, before, "{kind:?}");
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = quadratic_store();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &s);
        let g = Grads { data: vec![vec![1.0, 0.0]] };
        opt.step(&mut s, &g);
        opt.step(&mut s, &g);
        // 3 - 0.1*1 - 0.1*(0.9 + 1)
        assert!((s.entries()[0].data[0] - 2.71).abs() < 1e-12);
    }
}
