//! Direct 3×3×3, stride-1, same-padded convolution on a channels-last copy of the input.
//!
//! Output positions across the whole batch are processed in register tiles of `R`
//! positions by `LANES` output channels, so no column matrix is materialised and
//! small spatial grids still fill the vector units. The input gradient reuses the
//! forward kernel with the flipped, channel-transposed weights.

use std::any::TypeId;

use super::scalar::Scalar;
use super::tensor::Feat;

const LANES: usize = 16;
const TAPS: usize = 27;
const POS_BLOCK: usize = 256;

fn round_up(x: usize) -> usize {
    x.div_ceil(LANES) * LANES
}

/// Index tables for a batch of `n` grids of shape `dims` padded by one voxel on every side.
struct Grid {
    bases: Vec<usize>,
    offsets: [usize; TAPS],
    padded_len: usize,
}

impl Grid {
    fn new(n: usize, dims: [usize; 3]) -> Self {
        let [d, h, w] = dims;
        let (pd, ph, pw) = (d + 2, h + 2, w + 2);
        let mut bases = Vec::with_capacity(n * d * h * w);
        for i in 0..n {
            for z in 0..d {
                for y in 0..h {
                    let row = ((i * pd + z) * ph + y) * pw;
                    bases.extend(row..row + w);
                }
            }
        }
        let mut offsets = [0; TAPS];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    offsets[(kd * 3 + kh) * 3 + kw] = (kd * ph + kh) * pw + kw;
                }
            }
        }
        Self {
            bases,
            offsets,
            padded_len: n * pd * ph * pw,
        }
    }
}

/// `[n, c, d, h, w]` to zero-padded `[n, d+2, h+2, w+2, c]`.
fn to_padded_channels_last<T: Scalar>(x: &Feat<T>, grid: &Grid) -> Vec<T> {
    let c = x.c;
    let [d, h, w] = x.dims;
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![T::zero(); grid.padded_len * c];
    for i in 0..x.n {
        let src = x.sample(i);
        for ci in 0..c {
            let plane = &src[ci * d * h * w..(ci + 1) * d * h * w];
            for z in 0..d {
                for y in 0..h {
                    let row = &plane[(z * h + y) * w..(z * h + y + 1) * w];
                    let dst0 = (((i * (d + 2) + z + 1) * ph + y + 1) * pw + 1) * c + ci;
                    for (xw, v) in row.iter().enumerate() {
                        out[dst0 + xw * c] = *v;
                    }
                }
            }
        }
    }
    out
}

/// `[n, c, s]` to `[n·s, stride]` with channels in the first `c` lanes of each row.
fn to_channels_last<T: Scalar>(x: &Feat<T>, stride: usize) -> Vec<T> {
    let s = x.spatial();
    let mut out = vec![T::zero(); x.n * s * stride];
    for i in 0..x.n {
        let src = x.sample(i);
        for ci in 0..x.c {
            for (j, v) in src[ci * s..(ci + 1) * s].iter().enumerate() {
                out[(i * s + j) * stride + ci] = *v;
            }
        }
    }
    out
}

fn from_channels_last<T: Scalar>(cl: &[T], stride: usize, n: usize, c: usize, dims: [usize; 3]) -> Feat<T> {
    let mut y = Feat::zeros(n, c, dims);
    let s = y.spatial();
    for i in 0..n {
        let dst = y.sample_mut(i);
        for j in 0..s {
            let row = &cl[(i * s + j) * stride..(i * s + j) * stride + c];
            for (co, v) in row.iter().enumerate() {
                dst[co * s + j] = *v;
            }
        }
    }
    y
}

/// `out[p, co] = Σ_k Σ_ci xp[(bases[p] + offsets[k])·cin + ci] · wt[k, ci, co]`,
/// with `wt` laid out `[TAPS, cin, cout_p]` and `out` `[positions, cout_p]`.
fn conv_kernel<T: Scalar, const R: usize>(
    xp: &[T],
    cin: usize,
    wt: &[T],
    cout_p: usize,
    grid: &Grid,
    out: &mut [T],
) {
    if !check_conv(xp, cin, wt.len(), cout_p, grid, out.len()) {
        return;
    }
    let bases = &grid.bases;
    let npos = bases.len();

    let mut t = 0;
    while t < npos {
        let cnt = R.min(npos - t);
        let mut b = [0usize; R];
        for (r, slot) in b.iter_mut().enumerate() {
            *slot = bases[t + r.min(cnt - 1)];
        }
        for chunk in 0..cout_p / LANES {
            let mut acc = [[T::zero(); LANES]; R];
            for (k, &o) in grid.offsets.iter().enumerate() {
                let mut rows = [0usize; R];
                for r in 0..R {
                    rows[r] = (b[r] + o) * cin;
                }
                let wk = k * cin * cout_p + chunk * LANES;
                for ci in 0..cin {
                    // SAFETY: wk + ci·cout_p + LANES ≤ wt.len() by the layout assertion, and
                    // rows[r] + ci < xp.len() by the max_base assertion above.
                    let w: &[T; LANES] = unsafe { &*(wt.as_ptr().add(wk + ci * cout_p) as *const [T; LANES]) };
                    for r in 0..R {
                        let xv = unsafe { *xp.get_unchecked(rows[r] + ci) };
                        for j in 0..LANES {
                            acc[r][j] += xv * w[j];
                        }
                    }
                }
            }
            for (r, a) in acc.iter().enumerate().take(cnt) {
                let at = (t + r) * cout_p + chunk * LANES;
                out[at..at + LANES].copy_from_slice(a);
            }
        }
        t += R;
    }
}

/// `dwt[k, ci, co] += Σ_p xp[(bases[p] + offsets[k])·cin + ci] · dy[p, co]`.
fn weight_grad_kernel<T: Scalar, const R: usize>(
    xp: &[T],
    cin: usize,
    dy: &[T],
    cout_p: usize,
    grid: &Grid,
    dwt: &mut [T],
) {
    if !check_conv(xp, cin, dwt.len(), cout_p, grid, dy.len()) {
        return;
    }
    let bases = &grid.bases;
    let npos = bases.len();

    for p0 in (0..npos).step_by(POS_BLOCK) {
        let p1 = (p0 + POS_BLOCK).min(npos);
        for (k, &o) in grid.offsets.iter().enumerate() {
            for ci0 in (0..cin).step_by(R) {
                let cnt = R.min(cin - ci0);
                let mut lane_ci = [0usize; R];
                for (r, slot) in lane_ci.iter_mut().enumerate() {
                    *slot = ci0 + r.min(cnt - 1);
                }
                for chunk in 0..cout_p / LANES {
                    let mut acc = [[T::zero(); LANES]; R];
                    for p in p0..p1 {
                        let xrow = (bases[p] + o) * cin;
                        // SAFETY: p < npos and dy.len() == npos·cout_p; xrow + ci < xp.len()
                        // by the max_base assertion.
                        let g: &[T; LANES] =
                            unsafe { &*(dy.as_ptr().add(p * cout_p + chunk * LANES) as *const [T; LANES]) };
                        for r in 0..R {
                            let xv = unsafe { *xp.get_unchecked(xrow + lane_ci[r]) };
                            for j in 0..LANES {
                                acc[r][j] += xv * g[j];
                            }
                        }
                    }
                    for (r, a) in acc.iter().enumerate().take(cnt) {
                        let at = (k * cin + ci0 + r) * cout_p + chunk * LANES;
                        for (d, v) in dwt[at..at + LANES].iter_mut().zip(a) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

fn as_f32<T: Scalar>(x: &[T]) -> Option<&[f32]> {
    // SAFETY: T is f32 when the type ids match.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { &*(x as *const [T] as *const [f32]) })
}

fn as_f32_mut<T: Scalar>(x: &mut [T]) -> Option<&mut [f32]> {
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { &mut *(x as *mut [T] as *mut [f32]) })
}

fn conv_cl<T: Scalar>(xp: &[T], cin: usize, wt: &[T], cout_p: usize, grid: &Grid, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if let (Some(xp), Some(wt)) = (as_f32(xp), as_f32(wt)) {
        let out = as_f32_mut(out).unwrap();
        if x86::conv_f32(xp, cin, wt, cout_p, grid, out) {
            return;
        }
    }
    conv_kernel::<T, 4>(xp, cin, wt, cout_p, grid, out)
}

fn weight_grad_cl<T: Scalar>(xp: &[T], cin: usize, dy: &[T], cout_p: usize, grid: &Grid, dwt: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if let (Some(xp), Some(dy)) = (as_f32(xp), as_f32(dy)) {
        let dwt = as_f32_mut(dwt).unwrap();
        if x86::weight_grad_f32(xp, cin, dy, cout_p, grid, dwt) {
            return;
        }
    }
    weight_grad_kernel::<T, 4>(xp, cin, dy, cout_p, grid, dwt)
}

/// Checks shared by every kernel; returns false when there is nothing to do.
fn check_conv<T>(xp: &[T], cin: usize, wt_len: usize, cout_p: usize, grid: &Grid, out_len: usize) -> bool {
    assert_eq!(cout_p % LANES, 0);
    assert_eq!(wt_len, TAPS * cin * cout_p);
    assert_eq!(out_len, grid.bases.len() * cout_p);
    match grid.bases.iter().max() {
        None => false,
        Some(&max_base) => {
            assert!((max_base + grid.offsets[TAPS - 1] + 1) * cin <= xp.len());
            true
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use super::{check_conv, Grid, LANES, POS_BLOCK, TAPS};

    pub(super) fn conv_f32(xp: &[f32], cin: usize, wt: &[f32], cout_p: usize, grid: &Grid, out: &mut [f32]) -> bool {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: feature detected at runtime; bounds checked inside.
            unsafe { conv_avx512::<8>(xp, cin, wt, cout_p, grid, out) };
            true
        } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            unsafe { conv_avx2::<6>(xp, cin, wt, cout_p, grid, out) };
            true
        } else {
            false
        }
    }

    pub(super) fn weight_grad_f32(xp: &[f32], cin: usize, dy: &[f32], cout_p: usize, grid: &Grid, dwt: &mut [f32]) -> bool {
        if is_x86_feature_detected!("avx512f") {
            unsafe { weight_grad_avx512::<8>(xp, cin, dy, cout_p, grid, dwt) };
            true
        } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            unsafe { weight_grad_avx2::<6>(xp, cin, dy, cout_p, grid, dwt) };
            true
        } else {
            false
        }
    }

    #[cfg(test)]
    pub(super) unsafe fn conv_avx512_for_test(xp: &[f32], cin: usize, wt: &[f32], cout_p: usize, grid: &Grid, out: &mut [f32]) {
        conv_avx512::<8>(xp, cin, wt, cout_p, grid, out)
    }

    #[cfg(test)]
    pub(super) unsafe fn conv_avx2_for_test(xp: &[f32], cin: usize, wt: &[f32], cout_p: usize, grid: &Grid, out: &mut [f32]) {
        conv_avx2::<6>(xp, cin, wt, cout_p, grid, out)
    }

    #[cfg(test)]
    pub(super) unsafe fn weight_grad_avx512_for_test(xp: &[f32], cin: usize, dy: &[f32], cout_p: usize, grid: &Grid, dwt: &mut [f32]) {
        weight_grad_avx512::<8>(xp, cin, dy, cout_p, grid, dwt)
    }

    #[cfg(test)]
    pub(super) unsafe fn weight_grad_avx2_for_test(xp: &[f32], cin: usize, dy: &[f32], cout_p: usize, grid: &Grid, dwt: &mut [f32]) {
        weight_grad_avx2::<6>(xp, cin, dy, cout_p, grid, dwt)
    }

    /// Positions of the tile starting at `t`; a short final tile repeats its last position.
    #[inline(always)]
    fn tile<const R: usize>(bases: &[usize], t: usize) -> ([usize; R], usize) {
        let cnt = R.min(bases.len() - t);
        let mut b = [0usize; R];
        for (r, slot) in b.iter_mut().enumerate() {
            *slot = bases[t + r.min(cnt - 1)];
        }
        (b, cnt)
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn conv_avx512<const R: usize>(xp: &[f32], cin: usize, wt: &[f32], cout_p: usize, grid: &Grid, out: &mut [f32]) {
        if !check_conv(xp, cin, wt.len(), cout_p, grid, out.len()) {
            return;
        }
        let (x, w, o) = (xp.as_ptr(), wt.as_ptr(), out.as_mut_ptr());
        for t in (0..grid.bases.len()).step_by(R) {
            let (b, cnt) = tile::<R>(&grid.bases, t);
            for chunk in 0..cout_p / LANES {
                let mut acc = [_mm512_setzero_ps(); R];
                for k in 0..TAPS {
                    let off = grid.offsets[k];
                    let mut rows = [x; R];
                    for r in 0..R {
                        rows[r] = x.add((b[r] + off) * cin);
                    }
                    let wk = w.add(k * cin * cout_p + chunk * LANES);
                    for ci in 0..cin {
                        let wv = _mm512_loadu_ps(wk.add(ci * cout_p));
                        for r in 0..R {
                            acc[r] = _mm512_fmadd_ps(_mm512_set1_ps(*rows[r].add(ci)), wv, acc[r]);
                        }
                    }
                }
                for (r, a) in acc.iter().enumerate().take(cnt) {
                    _mm512_storeu_ps(o.add((t + r) * cout_p + chunk * LANES), *a);
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn conv_avx2<const R: usize>(xp: &[f32], cin: usize, wt: &[f32], cout_p: usize, grid: &Grid, out: &mut [f32]) {
        if !check_conv(xp, cin, wt.len(), cout_p, grid, out.len()) {
            return;
        }
        let (x, w, o) = (xp.as_ptr(), wt.as_ptr(), out.as_mut_ptr());
        for t in (0..grid.bases.len()).step_by(R) {
            let (b, cnt) = tile::<R>(&grid.bases, t);
            for chunk in 0..cout_p / LANES {
                let mut lo = [_mm256_setzero_ps(); R];
                let mut hi = [_mm256_setzero_ps(); R];
                for k in 0..TAPS {
                    let off = grid.offsets[k];
                    let mut rows = [x; R];
                    for r in 0..R {
                        rows[r] = x.add((b[r] + off) * cin);
                    }
                    let wk = w.add(k * cin * cout_p + chunk * LANES);
                    for ci in 0..cin {
                        let w0 = _mm256_loadu_ps(wk.add(ci * cout_p));
                        let w1 = _mm256_loadu_ps(wk.add(ci * cout_p + 8));
                        for r in 0..R {
                            let xv = _mm256_set1_ps(*rows[r].add(ci));
                            lo[r] = _mm256_fmadd_ps(xv, w0, lo[r]);
                            hi[r] = _mm256_fmadd_ps(xv, w1, hi[r]);
                        }
                    }
                }
                for r in 0..cnt {
                    let at = o.add((t + r) * cout_p + chunk * LANES);
                    _mm256_storeu_ps(at, lo[r]);
                    _mm256_storeu_ps(at.add(8), hi[r]);
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn weight_grad_avx512<const R: usize>(xp: &[f32], cin: usize, dy: &[f32], cout_p: usize, grid: &Grid, dwt: &mut [f32]) {
        if !check_conv(xp, cin, dwt.len(), cout_p, grid, dy.len()) {
            return;
        }
        let npos = grid.bases.len();
        let (x, g, d) = (xp.as_ptr(), dy.as_ptr(), dwt.as_mut_ptr());
        for p0 in (0..npos).step_by(POS_BLOCK) {
            let p1 = (p0 + POS_BLOCK).min(npos);
            for k in 0..TAPS {
                let off = grid.offsets[k];
                for ci0 in (0..cin).step_by(R) {
                    let cnt = R.min(cin - ci0);
                    let mut lane = [0usize; R];
                    for (r, slot) in lane.iter_mut().enumerate() {
                        *slot = ci0 + r.min(cnt - 1);
                    }
                    for chunk in 0..cout_p / LANES {
                        let mut acc = [_mm512_setzero_ps(); R];
                        for p in p0..p1 {
                            let xr = x.add((grid.bases[p] + off) * cin);
                            let gv = _mm512_loadu_ps(g.add(p * cout_p + chunk * LANES));
                            for r in 0..R {
                                acc[r] = _mm512_fmadd_ps(_mm512_set1_ps(*xr.add(lane[r])), gv, acc[r]);
                            }
                        }
                        for (r, a) in acc.iter().enumerate().take(cnt) {
                            let at = d.add((k * cin + ci0 + r) * cout_p + chunk * LANES);
                            _mm512_storeu_ps(at, _mm512_add_ps(_mm512_loadu_ps(at), *a));
                        }
                    }
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn weight_grad_avx2<const R: usize>(xp: &[f32], cin: usize, dy: &[f32], cout_p: usize, grid: &Grid, dwt: &mut [f32]) {
        if !check_conv(xp, cin, dwt.len(), cout_p, grid, dy.len()) {
            return;
        }
        let npos = grid.bases.len();
        let (x, g, d) = (xp.as_ptr(), dy.as_ptr(), dwt.as_mut_ptr());
        for p0 in (0..npos).step_by(POS_BLOCK) {
            let p1 = (p0 + POS_BLOCK).min(npos);
            for k in 0..TAPS {
                let off = grid.offsets[k];
                for ci0 in (0..cin).step_by(R) {
                    let cnt = R.min(cin - ci0);
                    let mut lane = [0usize; R];
                    for (r, slot) in lane.iter_mut().enumerate() {
                        *slot = ci0 + r.min(cnt - 1);
                    }
                    for chunk in 0..cout_p / LANES {
                        let mut lo = [_mm256_setzero_ps(); R];
                        let mut hi = [_mm256_setzero_ps(); R];
                        for p in p0..p1 {
                            let xr = x.add((grid.bases[p] + off) * cin);
                            let g0 = _mm256_loadu_ps(g.add(p * cout_p + chunk * LANES));
                            let g1 = _mm256_loadu_ps(g.add(p * cout_p + chunk * LANES + 8));
                            for r in 0..R {
                                let xv = _mm256_set1_ps(*xr.add(lane[r]));
                                lo[r] = _mm256_fmadd_ps(xv, g0, lo[r]);
                                hi[r] = _mm256_fmadd_ps(xv, g1, hi[r]);
                            }
                        }
                        for r in 0..cnt {
                            let at = d.add((k * cin + ci0 + r) * cout_p + chunk * LANES);
                            _mm256_storeu_ps(at, _mm256_add_ps(_mm256_loadu_ps(at), lo[r]));
                            _mm256_storeu_ps(at.add(8), _mm256_add_ps(_mm256_loadu_ps(at.add(8)), hi[r]));
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass with weights `w` laid out `[cout, cin, 3, 3, 3]`.
pub fn conv3_same<T: Scalar>(x: &Feat<T>, w: &[T], cout: usize) -> Feat<T> {
    let cin = x.c;
    assert_eq!(w.len(), cout * cin * TAPS);
    let cout_p = round_up(cout);
    let mut wt = vec![T::zero(); TAPS * cin * cout_p];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..TAPS {
                wt[(k * cin + ci) * cout_p + co] = w[(co * cin + ci) * TAPS + k];
            }
        }
    }
    run_forward(x, &wt, cout, cout_p)
}

/// Input gradient of [`conv3_same`].
pub fn conv3_same_input_grad<T: Scalar>(dy: &Feat<T>, w: &[T], cin: usize) -> Feat<T> {
    let cout = dy.c;
    assert_eq!(w.len(), cout * cin * TAPS);
    let cin_p = round_up(cin);
    let mut wt = vec![T::zero(); TAPS * cout * cin_p];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..TAPS {
                wt[(k * cout + co) * cin_p + ci] = w[(co * cin + ci) * TAPS + (TAPS - 1 - k)];
            }
        }
    }
    run_forward(dy, &wt, cin, cin_p)
}

fn run_forward<T: Scalar>(x: &Feat<T>, wt: &[T], cout: usize, cout_p: usize) -> Feat<T> {
    let grid = Grid::new(x.n, x.dims);
    let xp = to_padded_channels_last(x, &grid);
    let mut out = vec![T::zero(); grid.bases.len() * cout_p];
    conv_cl(&xp, x.c, wt, cout_p, &grid, &mut out);
    from_channels_last(&out, cout_p, x.n, cout, x.dims)
}

/// Accumulates the weight gradient of [`conv3_same`] into `dw` (`[cout, cin, 3, 3, 3]`).
pub fn conv3_same_weight_grad<T: Scalar>(x: &Feat<T>, dy: &Feat<T>, dw: &mut [T]) {
    let (cin, cout) = (x.c, dy.c);
    assert_eq!(dw.len(), cout * cin * TAPS);
    assert_eq!((x.n, x.dims), (dy.n, dy.dims));
    let cout_p = round_up(cout);
    let grid = Grid::new(x.n, x.dims);
    let xp = to_padded_channels_last(x, &grid);
    let dycl = to_channels_last(dy, cout_p);
    let mut dwt = vec![T::zero(); TAPS * cin * cout_p];
    weight_grad_cl(&xp, cin, &dycl, cout_p, &grid, &mut dwt);
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..TAPS {
                dw[(co * cin + ci) * TAPS + k] += dwt[(k * cin + ci) * cout_p + co];
            }
        }
    }
}
