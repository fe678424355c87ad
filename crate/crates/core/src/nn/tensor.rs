use super::scalar::Scalar;

/// Batch of multi-channel 3D feature maps, layout `[n, c, d, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<T> {
    pub n: usize,
    pub c: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> Feat<T> {
    pub fn zeros(n: usize, c: usize, dims: [usize; 3]) -> Self {
        Self {
            n,
            c,
            dims,
            data: vec![T::zero(); n * c * dims.iter().product::<usize>()],
        }
    }

    pub fn from_data(n: usize, c: usize, dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * dims.iter().product::<usize>(), "feature buffer length");
        Self { n, c, dims, data }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.spatial()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Copies channels `[from, from + count)` of every sample into a new tensor.
    pub fn channel_slice(&self, from: usize, count: usize) -> Feat<T> {
        let s = self.spatial();
        let mut out = Vec::with_capacity(self.n * count * s);
        for i in 0..self.n {
            let src = self.sample(i);
            out.extend_from_slice(&src[from * s..(from + count) * s]);
        }
        Feat::from_data(self.n, count, self.dims, out)
    }
}

/// Borrowed view of the first `c` channels of each sample in a wider buffer.
#[derive(Debug, Clone, Copy)]
pub struct FeatView<'a, T> {
    pub data: &'a [T],
    pub n: usize,
    pub c: usize,
    pub dims: [usize; 3],
    pub sample_stride: usize,
}

impl<'a, T: Scalar> FeatView<'a, T> {
    pub fn of(f: &'a Feat<T>) -> Self {
        Self {
            data: &f.data,
            n: f.n,
            c: f.c,
            dims: f.dims,
            sample_stride: f.sample_len(),
        }
    }

    pub fn prefix(f: &'a Feat<T>, c: usize) -> Self {
        assert!(c <= f.c);
        Self {
            c,
            ..Self::of(f)
        }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn sample(&self, i: usize) -> &'a [T] {
        let start = i * self.sample_stride;
        &self.data[start..start + self.c * self.spatial()]
    }
}

const ACC_LANES: usize = 8;

/// Sum accumulated in `f64` over eight interleaved lanes.
pub fn lane_sum<T: Scalar>(xs: &[T]) -> f64 {
    let mut acc = [0.0f64; ACC_LANES];
    let chunks = xs.chunks_exact(ACC_LANES);
    let tail: f64 = chunks.remainder().iter().map(|v| v.f64()).sum();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v.f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `Σ (x − mean)²` accumulated like [`lane_sum`].
pub fn lane_sum_sq_dev<T: Scalar>(xs: &[T], mean: f64) -> f64 {
    let mut acc = [0.0f64; ACC_LANES];
    let chunks = xs.chunks_exact(ACC_LANES);
    let tail: f64 = chunks.remainder().iter().map(|v| (v.f64() - mean).powi(2)).sum();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            let d = v.f64() - mean;
            *a += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Dot product accumulated like [`lane_sum`].
pub fn lane_dot<T: Scalar>(xs: &[T], ys: &[T]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mut acc = [0.0f64; ACC_LANES];
    let xc = xs.chunks_exact(ACC_LANES);
    let yc = ys.chunks_exact(ACC_LANES);
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a.f64() * b.f64()).sum();
    for (a8, b8) in xc.zip(yc) {
        for ((acc, a), b) in acc.iter_mut().zip(a8).zip(b8) {
            *acc += a.f64() * b.f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        *v = v.max(T::zero());
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut [T], relu_out: &[T]) {
    for (g, &o) in grad.iter_mut().zip(relu_out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}
