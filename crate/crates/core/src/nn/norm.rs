//! Group normalization with per-channel affine parameters.

use super::params::{Grads, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::{lane_dot, lane_sum, lane_sum_sq_dev, Feat, FeatView};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    /// Normalized input, contiguous `[n, c, s]`.
    pub xhat: Vec<T>,
    /// `1/sqrt(var + eps)` per (sample, group).
    pub inv_std: Vec<T>,
}

/// Number of groups for a channel count: the largest of 8, 4, 2, 1 dividing it.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), vec![channels], vec![T::one(); channels]);
        let beta = store.add(format!("{name}.bias"), vec![channels], vec![T::zero(); channels]);
        Self {
            gamma,
            beta,
            channels,
            groups: group_count(channels),
        }
    }

    /// Normalizes and applies the affine map; with `keep` it also returns the backward cache.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: FeatView<'_, T>, keep: bool) -> (Feat<T>, Option<NormCache<T>>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let s = x.spatial();
        let cpg = self.channels / self.groups;
        let m = (cpg * s) as f64;
        let mut y = Vec::with_capacity(x.n * x.c * s);
        let mut xhat = Vec::with_capacity(if keep { x.n * x.c * s } else { 0 });
        let mut inv_std = Vec::with_capacity(x.n * self.groups);
        for i in 0..x.n {
            let src = x.sample(i);
            for g in 0..self.groups {
                let block = &src[g * cpg * s..(g + 1) * cpg * s];
                let mean = lane_sum(block) / m;
                let var = lane_sum_sq_dev(block, mean) / m;
                let istd = 1.0 / (var + NORM_EPS).sqrt();
                inv_std.push(T::of(istd));
                for ch in g * cpg..(g + 1) * cpg {
                    let xs = &src[ch * s..(ch + 1) * s];
                    let scale = T::of(gamma[ch].f64() * istd);
                    let shift = T::of(beta[ch].f64() - mean * gamma[ch].f64() * istd);
                    y.extend(xs.iter().map(|v| *v * scale + shift));
                    if keep {
                        let (mean_t, istd_t) = (T::of(mean), T::of(istd));
                        xhat.extend(xs.iter().map(|v| (*v - mean_t) * istd_t));
                    }
                }
            }
        }
        let cache = keep.then_some(NormCache { xhat, inv_std });
        (Feat::from_data(x.n, x.c, x.dims, y), cache)
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &NormCache<T>, dy: &Feat<T>, grads: &mut Grads<T>) -> Feat<T> {
        let gamma = p.get(self.gamma);
        let s = dy.spatial();
        let c = self.channels;
        let cpg = c / self.groups;
        let m = (cpg * s) as f64;
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        let mut dx = Vec::with_capacity(dy.n * c * s);
        for i in 0..dy.n {
            let dys = dy.sample(i);
            let xh = &cache.xhat[i * c * s..(i + 1) * c * s];
            for g in 0..self.groups {
                let istd = cache.inv_std[i * self.groups + g].f64();
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for ch in g * cpg..(g + 1) * cpg {
                    let range = ch * s..(ch + 1) * s;
                    let dg = lane_dot(&dys[range.clone()], &xh[range.clone()]);
                    let db = lane_sum(&dys[range]);
                    dgamma[ch] += dg;
                    dbeta[ch] += db;
                    sum_d += db * gamma[ch].f64();
                    sum_dx += dg * gamma[ch].f64();
                }
                // dx = istd/m · (m·γ·dy − Σγdy − x̂·Σγdy·x̂)
                let k = istd / m;
                let b = T::of(-k * sum_dx);
                let c0 = T::of(-k * sum_d);
                for ch in g * cpg..(g + 1) * cpg {
                    let a = T::of(k * m * gamma[ch].f64());
                    let range = ch * s..(ch + 1) * s;
                    dx.extend(dys[range.clone()].iter().zip(&xh[range]).map(|(g, x)| a * *g + b * *x + c0));
                }
            }
        }
        for (acc, v) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *acc += T::of(*v);
        }
        for (acc, v) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *acc += T::of(*v);
        }
        Feat::from_data(dy.n, c, dy.dims, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_groups_are_standardized() {
        let mut p = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut p, "gn", 8);
        let x = Feat::from_data(2, 8, [2, 3, 2], (0..192).map(|i| (i as f64 * 1.7).sin() * 3.0 + 1.0).collect());
        let (y, _) = gn.forward(&p, FeatView::of(&x), false);
        let per_group = 12;
        for chunk in y.data.chunks(per_group) {
            let mean: f64 = chunk.iter().sum::<f64>() / per_group as f64;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut p, "gn", 6);
        for (i, v) in p.get_mut(gn.gamma).iter_mut().enumerate() {
            *v = 0.5 + i as f64 * 0.1;
        }
        let x = Feat::from_data(2, 6, [2, 2, 2], (0..96).map(|i| (i as f64 * 0.77).sin()).collect());
        let r: Vec<f64> = (0..96).map(|i| (i as f64 * 1.31).cos()).collect();
        let loss = |p: &ParamStore<f64>, x: &Feat<f64>| -> f64 {
            gn.forward(p, FeatView::of(x), false).0.data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = gn.forward(&p, FeatView::of(&x), true);
        let mut g = p.zero_grads();
        let dx = gn.backward(&p, &cache.unwrap(), &Feat::from_data(2, 6, [2, 2, 2], r.clone()), &mut g);
        let h = 1e-6;
        for idx in [0, 13, 50, 95] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - dx.data[idx]).abs() < 1e-6);
        }
        for id in [gn.gamma, gn.beta] {
            for idx in 0..6 {
                let mut pp = p.clone();
                pp.get_mut(id)[idx] += h;
                let mut pm = p.clone();
                pm.get_mut(id)[idx] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                assert!((fd - g.get(id)[idx]).abs() < 1e-6);
            }
        }
    }
}
