//! 3D convolution (no bias) via im2col + GEMM.

use super::params::{Grads, ParamId, ParamStore};
use super::direct;
use super::scalar::{gemm, Op, Scalar};
use super::tensor::Feat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3d {
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[inline]
fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + off - pad` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    // need o*stride + off >= pad and o*stride + off < len + pad
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    let hi = if len + pad > off {
        ((len + pad - off - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one sample `[c, d, h, w]` into `[c·k³, od·oh·ow]` columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    dims: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    out: [usize; 3],
    cols: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    debug_assert!(cols.len() >= c * k * k * k * p);
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            let (d_lo, d_hi) = valid_range(od, d, stride, kd, pad);
            for kh in 0..k {
                let (h_lo, h_hi) = valid_range(oh, h, stride, kh, pad);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_range(ow, w, stride, kw, pad);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    row += 1;
                    dst.fill(T::zero());
                    for o_d in d_lo..d_hi {
                        let id = o_d * stride + kd - pad;
                        for o_h in h_lo..h_hi {
                            let ih = o_h * stride + kh - pad;
                            let src = &xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            let base = (o_d * oh + o_h) * ow;
                            if stride == 1 {
                                let iw0 = w_lo + kw - pad;
                                dst[base + w_lo..base + w_hi]
                                    .copy_from_slice(&src[iw0..iw0 + (w_hi - w_lo)]);
                            } else {
                                for o_w in w_lo..w_hi {
                                    dst[base + o_w] = src[o_w * stride + kw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[c, d, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    dims: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    out: [usize; 3],
    x: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            let (d_lo, d_hi) = valid_range(od, d, stride, kd, pad);
            for kh in 0..k {
                let (h_lo, h_hi) = valid_range(oh, h, stride, kh, pad);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_range(ow, w, stride, kw, pad);
                    let src = &cols[row * p..(row + 1) * p];
                    row += 1;
                    for o_d in d_lo..d_hi {
                        let id = o_d * stride + kd - pad;
                        for o_h in h_lo..h_hi {
                            let ih = o_h * stride + kh - pad;
                            let base = (o_d * oh + o_h) * ow;
                            let dst = &mut xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            for o_w in w_lo..w_hi {
                                dst[o_w * stride + kw - pad] += src[base + o_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Conv3d {
    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|l| conv_out(l, self.k, self.stride, self.pad))
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_same3(&self) -> bool {
        self.k == 3 && self.stride == 1 && self.pad == 1
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Feat<T>) -> Feat<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let w = p.get(self.weight);
        if self.is_same3() {
            return direct::conv3_same(x, w, self.cout);
        }
        let out_dims = self.out_dims(x.dims);
        let np: usize = out_dims.iter().product();
        let kk = self.fan_in();
        let mut y = Feat::zeros(x.n, self.cout, out_dims);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * np] };
        for i in 0..x.n {
            let rhs = if self.is_pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), self.cin, x.dims, self.k, self.stride, self.pad, out_dims, &mut cols);
                &cols
            };
            gemm(self.cout, np, kk, T::one(), w, Op::N, rhs, Op::N, T::zero(), y.sample_mut(i));
        }
        y
    }

    /// Accumulates the weight gradient and returns the input gradient when `need_dx`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &Feat<T>,
        dy: &Feat<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Feat<T>> {
        let w = p.get(self.weight);
        if self.is_same3() {
            direct::conv3_same_weight_grad(x, dy, grads.get_mut(self.weight));
            return need_dx.then(|| direct::conv3_same_input_grad(dy, w, self.cin));
        }
        let out_dims = dy.dims;
        let np: usize = out_dims.iter().product();
        let kk = self.fan_in();
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * np] };

        {
            let dw = grads.get_mut(self.weight);
            for i in 0..x.n {
                let rhs = if self.is_pointwise() {
                    x.sample(i)
                } else {
                    im2col(x.sample(i), self.cin, x.dims, self.k, self.stride, self.pad, out_dims, &mut cols);
                    &cols
                };
                gemm(self.cout, kk, np, T::one(), dy.sample(i), Op::N, rhs, Op::T, T::one(), dw);
            }
        }
        if !need_dx {
            return None;
        }

        let mut dx = Feat::zeros(x.n, self.cin, x.dims);
        let s_in: usize = x.dims.iter().product();
        if self.is_pointwise() {
            for i in 0..x.n {
                gemm(self.cin, s_in, self.cout, T::one(), w, Op::T, dy.sample(i), Op::N, T::zero(), dx.sample_mut(i));
            }
        } else if self.stride == 1 && 2 * self.pad + 1 == self.k {
            // Same-padded stride-1 conv: the input gradient is a conv of dy with the
            // spatially flipped, channel-transposed kernel.
            let k3 = self.k * self.k * self.k;
            let mut wf = vec![T::zero(); self.cin * self.cout * k3];
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    let src = &w[(co * self.cin + ci) * k3..(co * self.cin + ci + 1) * k3];
                    let dst = &mut wf[(ci * self.cout + co) * k3..(ci * self.cout + co + 1) * k3];
                    for (j, v) in src.iter().enumerate() {
                        dst[k3 - 1 - j] = *v;
                    }
                }
            }
            let mut dcols = vec![T::zero(); self.cout * k3 * s_in];
            for i in 0..x.n {
                im2col(dy.sample(i), self.cout, out_dims, self.k, 1, self.pad, x.dims, &mut dcols);
                gemm(self.cin, s_in, self.cout * k3, T::one(), &wf, Op::N, &dcols, Op::N, T::zero(), dx.sample_mut(i));
            }
        } else {
            for i in 0..x.n {
                gemm(kk, np, self.cout, T::one(), w, Op::T, dy.sample(i), Op::N, T::zero(), &mut cols);
                col2im(&cols, self.cin, x.dims, self.k, self.stride, self.pad, out_dims, dx.sample_mut(i));
            }
        }
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as an oracle.
    fn naive_conv(x: &Feat<f64>, w: &[f64], cout: usize, k: usize, s: usize, pad: usize) -> Feat<f64> {
        let od = x.dims.map(|l| conv_out(l, k, s, pad));
        let mut y = Feat::zeros(x.n, cout, od);
        let [d, h, wd] = x.dims;
        for n in 0..x.n {
            for co in 0..cout {
                for a in 0..od[0] {
                    for b in 0..od[1] {
                        for c in 0..od[2] {
                            let mut acc = 0.0;
                            for ci in 0..x.c {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let (i, j, l) = (
                                                (a * s + kd) as isize - pad as isize,
                                                (b * s + kh) as isize - pad as isize,
                                                (c * s + kw) as isize - pad as isize,
                                            );
                                            if i < 0 || j < 0 || l < 0 || i >= d as isize || j >= h as isize || l >= wd as isize {
                                                continue;
                                            }
                                            let xv = x.data[(((n * x.c + ci) * d + i as usize) * h + j as usize) * wd + l as usize];
                                            acc += xv * w[(((co * x.c + ci) * k + kd) * k + kh) * k + kw];
                                        }
                                    }
                                }
                            }
                            y.data[(((n * cout + co) * od[0] + a) * od[1] + b) * od[2] + c] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn setup(cin: usize, cout: usize, k: usize, s: usize, pad: usize, dims: [usize; 3]) -> (ParamStore<f64>, Conv3d, Feat<f64>) {
        let mut p = ParamStore::new();
        let n_w = cout * cin * k * k * k;
        let weight = p.add("w", vec![cout, cin, k, k, k], (0..n_w).map(|i| ((i * 7 % 13) as f64 - 6.0) / 10.0).collect());
        let conv = Conv3d { weight, cin, cout, k, stride: s, pad };
        let n = 2;
        let len = n * cin * dims.iter().product::<usize>();
        let x = Feat::from_data(n, cin, dims, (0..len).map(|i| ((i as f64) * 0.37).sin()).collect());
        (p, conv, x)
    }

    #[test]
    fn forward_matches_direct_convolution() {
        for &(k, s, pad) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (7, 2, 3), (2, 2, 0)] {
            let (p, conv, x) = setup(2, 3, k, s, pad, [5, 6, 7]);
            let y = conv.forward(&p, &x);
            let want = naive_conv(&x, p.get(conv.weight), 3, k, s, pad);
            assert_eq!(y.dims, want.dims);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-10, "k={k} s={s}");
            }
        }
    }

    /// Gradients of L = sum(y * r) for a fixed random r, against finite differences.
    #[test]
    fn backward_matches_finite_differences() {
        for &(k, s, pad) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0)] {
            let (p, conv, x) = setup(2, 3, k, s, pad, [4, 5, 3]);
            let y = conv.forward(&p, &x);
            let r: Vec<f64> = (0..y.data.len()).map(|i| ((i as f64) * 0.91).cos()).collect();
            let dy = Feat::from_data(y.n, y.c, y.dims, r.clone());
            let mut g = p.zero_grads();
            let dx = conv.backward(&p, &x, &dy, &mut g, true).unwrap();
            let loss = |p: &ParamStore<f64>, x: &Feat<f64>| -> f64 {
                conv.forward(p, x).data.iter().zip(&r).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            let nw = p.get(conv.weight).len();
            for idx in [0, 5 % nw, 17 % nw, nw - 1] {
                let mut pp = p.clone();
                pp.get_mut(conv.weight)[idx] += h;
                let mut pm = p.clone();
                pm.get_mut(conv.weight)[idx] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                assert!((fd - g.get(conv.weight)[idx]).abs() < 1e-6, "dW k={k} s={s}");
            }
            for idx in [0, 7, 31, x.data.len() - 1] {
                let mut xp = x.clone();
                xp.data[idx] += h;
                let mut xm = x.clone();
                xm.data[idx] -= h;
                let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
                assert!((fd - dx.data[idx]).abs() < 1e-6, "dX k={k} s={s}");
            }
        }
    }

    /// The f32 path runs the vectorized kernels; compare it with the f64 reference path.
    #[test]
    fn single_precision_kernels_match_double_precision() {
        for &(cin, cout, dims) in &[(5, 3, [3, 4, 5]), (20, 16, [4, 3, 6]), (16, 37, [2, 2, 9])] {
            let (p64, conv, x64) = setup(cin, cout, 3, 1, 1, dims);
            let p32: ParamStore<f32> = p64.cast();
            let x32 = Feat::from_data(x64.n, x64.c, x64.dims, x64.data.iter().map(|&v| v as f32).collect());
            let y64 = conv.forward(&p64, &x64);
            let y32 = conv.forward(&p32, &x32);
            let r: Vec<f64> = (0..y64.data.len()).map(|i| ((i as f64) * 0.53).cos()).collect();
            let dy64 = Feat::from_data(y64.n, y64.c, y64.dims, r.clone());
            let dy32 = Feat::from_data(y64.n, y64.c, y64.dims, r.iter().map(|&v| v as f32).collect());
            let (mut g64, mut g32) = (p64.zero_grads(), p32.zero_grads());
            let dx64 = conv.backward(&p64, &x64, &dy64, &mut g64, true).unwrap();
            let dx32 = conv.backward(&p32, &x32, &dy32, &mut g32, true).unwrap();
            let close = |a: &[f32], b: &[f64]| {
                assert_eq!(a.len(), b.len());
                for (u, v) in a.iter().zip(b) {
                    assert!((*u as f64 - v).abs() < 1e-4 * (1.0 + v.abs()), "{u} vs {v}");
                }
            };
            close(&y32.data, &y64.data);
            close(&dx32.data, &dx64.data);
            close(g32.get(conv.weight), g64.get(conv.weight));
        }
    }
}
