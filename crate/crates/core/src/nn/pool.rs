use super::scalar::Scalar;
use super::tensor::{lane_sum, Feat};

/// Max pooling with explicit padding (padded cells never win).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool3d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool3d {
    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|l| (l + 2 * self.pad - self.k) / self.stride + 1)
    }

    /// Input range `[lo, hi)` covered by output cell `o` along an axis of length `len`.
    #[inline]
    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = o * self.stride;
        let lo = start.saturating_sub(self.pad);
        let hi = (start + self.k).saturating_sub(self.pad).min(len);
        (lo, hi)
    }

    fn windows(&self, dims: [usize; 3]) -> [Vec<(usize, usize)>; 3] {
        let od = self.out_dims(dims);
        [0, 1, 2].map(|ax| (0..od[ax]).map(|o| self.window(o, dims[ax])).collect())
    }

    /// Pooled map, computed as three separable 1D max passes.
    pub fn forward<T: Scalar>(&self, x: &Feat<T>) -> Feat<T> {
        let od = self.out_dims(x.dims);
        let [d, h, w] = x.dims;
        let wins = self.windows(x.dims);
        let mut y = Feat::zeros(x.n, x.c, od);
        let s_in = d * h * w;
        let s_out: usize = od.iter().product();
        let mut pw = vec![T::zero(); d * h * od[2]];
        let mut ph = vec![T::zero(); d * od[1] * od[2]];
        let max_of = |xs: &[T]| xs.iter().copied().fold(T::neg_infinity(), T::max);
        for plane in 0..x.n * x.c {
            let src = &x.data[plane * s_in..(plane + 1) * s_in];
            for (r, row) in src.chunks_exact(w).enumerate() {
                for (o, &(lo, hi)) in wins[2].iter().enumerate() {
                    pw[r * od[2] + o] = max_of(&row[lo..hi]);
                }
            }
            for i in 0..d {
                for (o, &(lo, hi)) in wins[1].iter().enumerate() {
                    for c in 0..od[2] {
                        ph[(i * od[1] + o) * od[2] + c] =
                            (lo..hi).map(|j| pw[(i * h + j) * od[2] + c]).fold(T::neg_infinity(), T::max);
                    }
                }
            }
            let dst = &mut y.data[plane * s_out..(plane + 1) * s_out];
            let plane_hw = od[1] * od[2];
            for (o, &(lo, hi)) in wins[0].iter().enumerate() {
                let out = &mut dst[o * plane_hw..(o + 1) * plane_hw];
                out.copy_from_slice(&ph[lo * plane_hw..(lo + 1) * plane_hw]);
                for i in lo + 1..hi {
                    for (a, b) in out.iter_mut().zip(&ph[i * plane_hw..(i + 1) * plane_hw]) {
                        *a = a.max(*b);
                    }
                }
            }
        }
        y
    }

    /// Routes each output gradient to the first cell of its window (in scan order)
    /// that holds the pooled value.
    pub fn backward<T: Scalar>(&self, x: &Feat<T>, y: &Feat<T>, dy: &Feat<T>) -> Feat<T> {
        let [d, h, w] = x.dims;
        let wins = self.windows(x.dims);
        let mut dx = Feat::zeros(x.n, x.c, x.dims);
        let s_in = d * h * w;
        let s_out = y.spatial();
        for plane in 0..x.n * x.c {
            let src = &x.data[plane * s_in..(plane + 1) * s_in];
            let dst = &mut dx.data[plane * s_in..(plane + 1) * s_in];
            let ys = &y.data[plane * s_out..(plane + 1) * s_out];
            let gs = &dy.data[plane * s_out..(plane + 1) * s_out];
            let mut out_i = 0;
            for &(d0, d1) in &wins[0] {
                for &(h0, h1) in &wins[1] {
                    for &(w0, w1) in &wins[2] {
                        let target = ys[out_i];
                        let mut hit = (d0 * h + h0) * w + w0;
                        'scan: for i in d0..d1 {
                            for j in h0..h1 {
                                let row = (i * h + j) * w;
                                if let Some(l) = src[row + w0..row + w1].iter().position(|&v| v == target) {
                                    hit = row + w0 + l;
                                    break 'scan;
                                }
                            }
                        }
                        dst[hit] += gs[out_i];
                        out_i += 1;
                    }
                }
            }
        }
        dx
    }
}

/// 2×2×2 average pooling, stride 2, ceil mode: edge windows average only the cells they cover.
pub fn avg_pool2_ceil_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|l| l.div_ceil(2))
}

pub fn avg_pool2_ceil<T: Scalar>(x: &Feat<T>) -> Feat<T> {
    let od = avg_pool2_ceil_dims(x.dims);
    let [d, h, w] = x.dims;
    let mut y = Feat::zeros(x.n, x.c, od);
    let s_in = d * h * w;
    let s_out: usize = od.iter().product();
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * s_in..(plane + 1) * s_in];
        let dst = &mut y.data[plane * s_out..(plane + 1) * s_out];
        for i in 0..d {
            for j in 0..h {
                for l in 0..w {
                    dst[((i / 2) * od[1] + j / 2) * od[2] + l / 2] += src[(i * h + j) * w + l];
                }
            }
        }
        for a in 0..od[0] {
            for b in 0..od[1] {
                for c in 0..od[2] {
                    let cnt = window(a, d) * window(b, h) * window(c, w);
                    dst[(a * od[1] + b) * od[2] + c] /= T::of(cnt as f64);
                }
            }
        }
    }
    y
}

#[inline]
fn window(o: usize, len: usize) -> usize {
    (2 * o + 2).min(len) - 2 * o
}

pub fn avg_pool2_ceil_backward<T: Scalar>(dy: &Feat<T>, in_dims: [usize; 3]) -> Feat<T> {
    let [d, h, w] = in_dims;
    let od = dy.dims;
    let mut dx = Feat::zeros(dy.n, dy.c, in_dims);
    let s_in = d * h * w;
    let s_out: usize = od.iter().product();
    for plane in 0..dy.n * dy.c {
        let src = &dy.data[plane * s_out..(plane + 1) * s_out];
        let dst = &mut dx.data[plane * s_in..(plane + 1) * s_in];
        for i in 0..d {
            for j in 0..h {
                for l in 0..w {
                    let (a, b, c) = (i / 2, j / 2, l / 2);
                    let cnt = window(a, d) * window(b, h) * window(c, w);
                    dst[(i * h + j) * w + l] = src[(a * od[1] + b) * od[2] + c] / T::of(cnt as f64);
                }
            }
        }
    }
    dx
}

/// Mean over all spatial cells: `[n, c, ...] -> [n, c]` (row-major).
pub fn global_avg_pool<T: Scalar>(x: &Feat<T>) -> Vec<T> {
    let s = x.spatial();
    let inv = T::of(1.0 / s as f64);
    x.data.chunks(s).map(|ch| T::of(lane_sum(ch)) * inv).collect()
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &[T], n: usize, c: usize, dims: [usize; 3]) -> Feat<T> {
    let s: usize = dims.iter().product();
    let inv = T::of(1.0 / s as f64);
    let mut data = Vec::with_capacity(n * c * s);
    for &g in dy {
        data.extend(std::iter::repeat_n(g * inv, s));
    }
    Feat::from_data(n, c, dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(dims: [usize; 3]) -> Feat<f64> {
        let len = 2 * 3 * dims.iter().product::<usize>();
        Feat::from_data(2, 3, dims, (0..len).map(|i| ((i as f64) * 0.613).sin()).collect())
    }

    fn check_adjoint(fwd: impl Fn(&Feat<f64>) -> Feat<f64>, bwd: impl Fn(&Feat<f64>) -> Feat<f64>, x: &Feat<f64>) {
        let y = fwd(x);
        let r: Vec<f64> = (0..y.data.len()).map(|i| ((i as f64) * 1.7).cos()).collect();
        let dx = bwd(&Feat::from_data(y.n, y.c, y.dims, r.clone()));
        let loss = |x: &Feat<f64>| -> f64 { fwd(x).data.iter().zip(&r).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for idx in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data[idx]).abs() < 1e-6, "idx {idx}: {fd} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn max_pool_dims_and_gradient() {
        let mp = MaxPool3d { k: 3, stride: 2, pad: 1 };
        assert_eq!(mp.out_dims([16, 19, 16]), [8, 10, 8]);
        let x = feat([5, 6, 3]);
        let y = mp.forward(&x);
        check_adjoint(|x| mp.forward(x), |dy| mp.backward(&x, &y, dy), &x);
        // Ties: the gradient goes to the first maximal cell only.
        let flat = Feat::from_data(1, 1, [3, 3, 3], vec![1.0; 27]);
        let y = mp.forward(&flat);
        assert!(y.data.iter().all(|&v| v == 1.0));
        let g = mp.backward(&flat, &y, &Feat::from_data(1, 1, y.dims, vec![1.0; y.data.len()]));
        assert_eq!(g.data.iter().sum::<f64>(), y.data.len() as f64);
        assert_eq!(g.data[0], 1.0);
    }

    #[test]
    fn ceil_avg_pool_averages_partial_windows() {
        let x = Feat::from_data(1, 1, [3, 1, 1], vec![1.0, 3.0, 10.0]);
        let y = avg_pool2_ceil(&x);
        assert_eq!(y.dims, [2, 1, 1]);
        assert_eq!(y.data, vec![2.0, 10.0]);
        let x = feat([5, 4, 3]);
        check_adjoint(avg_pool2_ceil, |dy| avg_pool2_ceil_backward(dy, x.dims), &x);
    }

    #[test]
    fn global_pool_gradient() {
        let x = feat([2, 3, 2]);
        check_adjoint(
            |x| Feat::from_data(x.n, x.c, [1, 1, 1], global_avg_pool(x)),
            |dy| global_avg_pool_backward(&dy.data, dy.n, dy.c, x.dims),
            &x,
        );
    }
}
