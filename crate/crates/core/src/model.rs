//! Shared 3D dense-block backbone with age, sex and diagnosis heads.
//!
//! Layout follows the DenseNet recipe lifted to 3D: strided stem convolution and
//! max pool, four dense blocks with bottleneck layers, and transitions that
//! halve the channel count and average-pool by 2. A final normalization and
//! global average pool give a feature vector whose length depends only on the
//! config. Normalization layers are GroupNorm, so every sample is processed
//! independently and train/eval behave identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::nn::conv::Conv3d;
use crate::nn::norm::{GroupNorm, NormCache};
use crate::nn::params::{Grads, ParamId, ParamStore};
use crate::nn::pool::{self, MaxPool3d};
use crate::nn::tensor::{relu_backward_inplace, relu_inplace, Feat, FeatView};
use crate::nn::Scalar;
use crate::volume::Volume;

/// Smallest supported extent per input axis.
pub const MIN_INPUT_AXIS: usize = 16;

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Densenet121_3d,
    TinyDensenet3d,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Densenet121_3d => "DenseNet121",
            Variant::TinyDensenet3d => "TinyDenseNet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub init_features: usize,
    pub growth_rate: usize,
    pub block_layers: [usize; 4],
    /// Bottleneck width as a multiple of the growth rate.
    pub bn_size: usize,
    pub stem_kernel: usize,
    pub input_shape: [usize; 3],
}

impl BackboneConfig {
    /// DenseNet-121 with 3D kernels: blocks (6, 12, 24, 16), growth 32, 64 stem features.
    pub fn densenet121(input_shape: [usize; 3]) -> Self {
        Self {
            variant: Variant::Densenet121_3d,
            init_features: 64,
            growth_rate: 32,
            block_layers: [6, 12, 24, 16],
            bn_size: 4,
            stem_kernel: 7,
            input_shape,
        }
    }

    /// Roughly a tenth of the parameters of [`BackboneConfig::densenet121`].
    pub fn tiny(input_shape: [usize; 3]) -> Self {
        Self {
            variant: Variant::TinyDensenet3d,
            init_features: 32,
            growth_rate: 16,
            block_layers: [3, 6, 12, 8],
            bn_size: 4,
            stem_kernel: 3,
            input_shape,
        }
    }

    pub fn preset(variant: Variant, input_shape: [usize; 3]) -> Self {
        match variant {
            Variant::Densenet121_3d => Self::densenet121(input_shape),
            Variant::TinyDensenet3d => Self::tiny(input_shape),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&a| a < MIN_INPUT_AXIS) {
            return Err(Error::InvalidConfig(format!(
                "input shape {:?} too small for the pooling pyramid; minimum is {m}x{m}x{m}",
                self.input_shape,
                m = MIN_INPUT_AXIS
            )));
        }
        if self.init_features == 0 || self.growth_rate == 0 || self.bn_size == 0 {
            return Err(Error::InvalidConfig("feature counts must be positive".into()));
        }
        if self.block_layers.iter().any(|&l| l == 0) {
            return Err(Error::InvalidConfig("every dense block needs at least one layer".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::InvalidConfig("stem kernel must be odd".into()));
        }
        Ok(())
    }

    /// Length of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        let mut c = self.init_features;
        for (b, &l) in self.block_layers.iter().enumerate() {
            c += l * self.growth_rate;
            if b < 3 {
                c /= 2;
            }
        }
        c
    }

    /// Names of fields that differ from `other`.
    pub fn diff(&self, other: &BackboneConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.variant != other.variant {
            out.push("variant");
        }
        if self.init_features != other.init_features {
            out.push("init_features");
        }
        if self.growth_rate != other.growth_rate {
            out.push("growth_rate");
        }
        if self.block_layers != other.block_layers {
            out.push("block_layers");
        }
        if self.bn_size != other.bn_size {
            out.push("bn_size");
        }
        if self.stem_kernel != other.stem_kernel {
            out.push("stem_kernel");
        }
        if self.input_shape != other.input_shape {
            out.push("input_shape");
        }
        out
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    norm1: GroupNorm,
    conv1: Conv3d,
    norm2: GroupNorm,
    conv2: Conv3d,
}

#[derive(Debug, Clone)]
struct DenseBlock {
    in_channels: usize,
    growth: usize,
    layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
struct Transition {
    norm: GroupNorm,
    conv: Conv3d,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Arch {
    stem_conv: Conv3d,
    stem_norm: GroupNorm,
    stem_pool: MaxPool3d,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    final_norm: GroupNorm,
    age: Linear,
    sex: Linear,
    dx: Linear,
}

/// Per-sample outputs of the three heads. Sex and diagnosis are logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T> {
    pub age: Vec<T>,
    pub sex_logit: Vec<T>,
    pub dx_logit: Vec<T>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            age: vec![T::zero(); n],
            sex_logit: vec![T::zero(); n],
            dx_logit: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.age.len()
    }

    pub fn is_empty(&self) -> bool {
        self.age.is_empty()
    }
}

struct LayerTape<T> {
    nc1: NormCache<T>,
    r1: Feat<T>,
    nc2: NormCache<T>,
    r2: Feat<T>,
}

struct TransitionTape<T> {
    nc: NormCache<T>,
    r: Feat<T>,
}

/// Activations kept by a training forward pass for the backward pass.
pub struct Tape<T> {
    n: usize,
    stem_in: Feat<T>,
    stem_nc: NormCache<T>,
    stem_r: Feat<T>,
    stem_pooled: Feat<T>,
    blocks: Vec<Vec<LayerTape<T>>>,
    block_dims: Vec<[usize; 3]>,
    transitions: Vec<TransitionTape<T>>,
    final_nc: NormCache<T>,
    final_r: Feat<T>,
    features: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct MultiTaskModel<T> {
    config: BackboneConfig,
    params: ParamStore<T>,
    arch: Arch,
    /// Constant added to the age head output; the head's own bias starts at zero.
    pub age_offset: f64,
}

fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<T> {
    let sd = (2.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * sd)
        })
        .collect()
}

fn conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Conv3d {
    let fan_in = cin * k * k * k;
    let weight = store.add(
        format!("{name}.weight"),
        vec![cout, cin, k, k, k],
        kaiming(rng, fan_in, cout * fan_in),
    );
    Conv3d {
        weight,
        cin,
        cout,
        k,
        stride,
        pad,
    }
}

fn linear<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize) -> Linear {
    let weight = store.add(format!("{name}.weight"), vec![1, fan_in], kaiming(rng, fan_in, fan_in));
    let bias = store.add(format!("{name}.bias"), vec![1], vec![T::zero()]);
    Linear { weight, bias }
}

fn add_into_prefix<T: Scalar>(buf: &mut Feat<T>, part: &Feat<T>) {
    let s = buf.spatial();
    for i in 0..buf.n {
        let dst = &mut buf.sample_mut(i)[..part.c * s];
        for (a, b) in dst.iter_mut().zip(part.sample(i)) {
            *a += *b;
        }
    }
}

impl<T: Scalar> MultiTaskModel<T> {
    /// Builds a model with Kaiming (fan-in, ReLU gain) weights and zero biases.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let sk = config.stem_kernel;
        let stem_conv = conv(&mut p, &mut rng, "backbone.stem.conv", 1, config.init_features, sk, 2, sk / 2);
        let stem_norm = GroupNorm::new(&mut p, "backbone.stem.norm", config.init_features);
        let mut c = config.init_features;
        let g = config.growth_rate;
        let bottleneck = config.bn_size * g;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &n_layers) in config.block_layers.iter().enumerate() {
            let in_channels = c;
            let layers = (0..n_layers)
                .map(|l| {
                    let name = format!("backbone.block{}.layer{}", b + 1, l + 1);
                    let cin = in_channels + l * g;
                    DenseLayer {
                        norm1: GroupNorm::new(&mut p, &format!("{name}.norm1"), cin),
                        conv1: conv(&mut p, &mut rng, &format!("{name}.conv1"), cin, bottleneck, 1, 1, 0),
                        norm2: GroupNorm::new(&mut p, &format!("{name}.norm2"), bottleneck),
                        conv2: conv(&mut p, &mut rng, &format!("{name}.conv2"), bottleneck, g, 3, 1, 1),
                    }
                })
                .collect();
            blocks.push(DenseBlock {
                in_channels,
                growth: g,
                layers,
            });
            c = in_channels + n_layers * g;
            if b < 3 {
                let name = format!("backbone.transition{}", b + 1);
                transitions.push(Transition {
                    norm: GroupNorm::new(&mut p, &format!("{name}.norm"), c),
                    conv: conv(&mut p, &mut rng, &format!("{name}.conv"), c, c / 2, 1, 1, 0),
                });
                c /= 2;
            }
        }
        let final_norm = GroupNorm::new(&mut p, "backbone.final_norm", c);
        let age = linear(&mut p, &mut rng, "head.age", c);
        let sex = linear(&mut p, &mut rng, "head.sex", c);
        let dx = linear(&mut p, &mut rng, "head.dx", c);
        debug_assert_eq!(c, config.feature_dim());
        Ok(Self {
            config: config.clone(),
            params: p,
            arch: Arch {
                stem_conv,
                stem_norm,
                stem_pool: MaxPool3d { k: 3, stride: 2, pad: 1 },
                blocks,
                transitions,
                final_norm,
                age,
                sex,
                dx,
            },
            age_offset: 0.0,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> MultiTaskModel<U> {
        MultiTaskModel {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
            age_offset: self.age_offset,
        }
    }

    /// Zeroes the weights and biases of all three heads.
    pub fn zero_heads(&mut self) {
        for l in [self.arch.age, self.arch.sex, self.arch.dx] {
            self.params.get_mut(l.weight).fill(T::zero());
            self.params.get_mut(l.bias).fill(T::zero());
        }
    }

    /// Stacks volumes into a single-channel batch after checking shape and finiteness.
    pub fn batch_from_volumes(&self, volumes: &[&Volume]) -> Result<Feat<T>> {
        let shape = self.config.input_shape;
        let mut data = Vec::with_capacity(volumes.len() * shape.iter().product::<usize>());
        for v in volumes {
            if v.shape() != shape {
                return Err(Error::ShapeMismatch {
                    got: v.shape(),
                    expected: shape,
                });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("model input".into()));
            }
            data.extend(v.data().iter().map(|&x| T::of(x as f64)));
        }
        Ok(Feat::from_data(volumes.len(), 1, shape, data))
    }

    fn check_batch(&self, x: &Feat<T>) -> Result<()> {
        if x.c != 1 || x.dims != self.config.input_shape {
            return Err(Error::ShapeMismatch {
                got: x.dims,
                expected: self.config.input_shape,
            });
        }
        if !x.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(())
    }

    pub fn forward_volumes(&self, volumes: &[&Volume]) -> Result<HeadOutputs<T>> {
        let batch = self.batch_from_volumes(volumes)?;
        self.forward(&batch)
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Feat<T>) -> Result<HeadOutputs<T>> {
        self.check_batch(x)?;
        let features = self.run_backbone(x.clone(), None);
        Ok(self.heads(&features, x.n))
    }

    /// Pooled backbone features, row-major `[n, feature_dim]`.
    pub fn features(&self, x: &Feat<T>) -> Result<Vec<T>> {
        self.check_batch(x)?;
        Ok(self.run_backbone(x.clone(), None))
    }

    /// Forward pass that records what [`MultiTaskModel::backward`] needs.
    pub fn forward_train(&self, x: &Feat<T>) -> Result<(HeadOutputs<T>, Tape<T>)> {
        self.check_batch(x)?;
        let mut slot = None;
        let features = self.run_backbone(x.clone(), Some(&mut slot));
        let mut tape = slot.expect("tape recorded");
        let out = self.heads(&features, x.n);
        tape.features = features;
        Ok((out, tape))
    }

    fn heads(&self, features: &[T], n: usize) -> HeadOutputs<T> {
        let f = self.feature_dim();
        let apply = |l: Linear, offset: T| -> Vec<T> {
            let w = self.params.get(l.weight);
            let b = self.params.get(l.bias)[0];
            (0..n)
                .map(|i| {
                    let row = &features[i * f..(i + 1) * f];
                    row.iter().zip(w).map(|(a, b)| *a * *b).sum::<T>() + b + offset
                })
                .collect()
        };
        HeadOutputs {
            age: apply(self.arch.age, T::of(self.age_offset)),
            sex_logit: apply(self.arch.sex, T::zero()),
            dx_logit: apply(self.arch.dx, T::zero()),
        }
    }

    fn run_backbone(&self, x: Feat<T>, mut tape: Option<&mut Option<Tape<T>>>) -> Vec<T> {
        let keep = tape.is_some();
        let p = &self.params;
        let a = &self.arch;
        let n = x.n;

        let h = a.stem_conv.forward(p, &x);
        let (mut r, stem_nc) = a.stem_norm.forward(p, FeatView::of(&h), keep);
        relu_inplace(&mut r.data);
        let mut cur = a.stem_pool.forward(&r);
        let stem_pooled = if keep { cur.clone() } else { Feat::zeros(0, 0, [0; 3]) };

        let mut blocks_t = Vec::new();
        let mut block_dims = Vec::new();
        let mut trans_t = Vec::new();
        for (b, block) in a.blocks.iter().enumerate() {
            let (out, lt) = self.dense_block_forward(block, &cur, keep);
            block_dims.push(out.dims);
            blocks_t.push(lt);
            cur = out;
            if let Some(t) = a.transitions.get(b) {
                let (mut tr, nc) = t.norm.forward(p, FeatView::of(&cur), keep);
                relu_inplace(&mut tr.data);
                let h = t.conv.forward(p, &tr);
                cur = pool::avg_pool2_ceil(&h);
                if keep {
                    trans_t.push(TransitionTape { nc: nc.unwrap(), r: tr });
                }
            }
        }
        let (mut fr, final_nc) = a.final_norm.forward(p, FeatView::of(&cur), keep);
        relu_inplace(&mut fr.data);
        let features = pool::global_avg_pool(&fr);

        if let Some(slot) = tape.as_deref_mut() {
            *slot = Some(Tape {
                n,
                stem_in: x,
                stem_nc: stem_nc.unwrap(),
                stem_r: r,
                stem_pooled,
                blocks: blocks_t,
                block_dims,
                transitions: trans_t,
                final_nc: final_nc.unwrap(),
                final_r: fr,
                features: Vec::new(),
            });
        }
        features
    }

    fn dense_block_forward(&self, block: &DenseBlock, x: &Feat<T>, keep: bool) -> (Feat<T>, Vec<LayerTape<T>>) {
        let p = &self.params;
        let total = block.in_channels + block.layers.len() * block.growth;
        let s = x.spatial();
        let mut buf = Feat::zeros(x.n, total, x.dims);
        for i in 0..x.n {
            buf.sample_mut(i)[..x.c * s].copy_from_slice(x.sample(i));
        }
        let mut tapes = Vec::new();
        for (l, layer) in block.layers.iter().enumerate() {
            let cin = block.in_channels + l * block.growth;
            let (mut r1, nc1) = layer.norm1.forward(p, FeatView::prefix(&buf, cin), keep);
            relu_inplace(&mut r1.data);
            let h = layer.conv1.forward(p, &r1);
            let (mut r2, nc2) = layer.norm2.forward(p, FeatView::of(&h), keep);
            relu_inplace(&mut r2.data);
            let y = layer.conv2.forward(p, &r2);
            for i in 0..x.n {
                buf.sample_mut(i)[cin * s..(cin + block.growth) * s].copy_from_slice(y.sample(i));
            }
            if keep {
                tapes.push(LayerTape {
                    nc1: nc1.unwrap(),
                    r1,
                    nc2: nc2.unwrap(),
                    r2,
                });
            }
        }
        (buf, tapes)
    }

    /// Parameter gradients of `sum_i d_age[i]*age[i] + d_sex[i]*sex[i] + d_dx[i]*dx[i]`.
    pub fn backward(&self, tape: &Tape<T>, d: &HeadOutputs<T>) -> Grads<T> {
        let p = &self.params;
        let a = &self.arch;
        let n = tape.n;
        let f = self.feature_dim();
        let mut grads = p.zero_grads();

        let mut dfeat = vec![T::zero(); n * f];
        for (l, dout) in [(a.age, &d.age), (a.sex, &d.sex_logit), (a.dx, &d.dx_logit)] {
            let w = p.get(l.weight);
            let mut dw = vec![T::zero(); f];
            let mut db = T::zero();
            for i in 0..n {
                let g = dout[i];
                if g == T::zero() {
                    continue;
                }
                db += g;
                let row = &tape.features[i * f..(i + 1) * f];
                for j in 0..f {
                    dw[j] += g * row[j];
                    dfeat[i * f + j] += g * w[j];
                }
            }
            for (acc, v) in grads.get_mut(l.weight).iter_mut().zip(&dw) {
                *acc += *v;
            }
            grads.get_mut(l.bias)[0] += db;
        }

        let mut g = pool::global_avg_pool_backward(&dfeat, n, f, tape.final_r.dims);
        relu_backward_inplace(&mut g.data, &tape.final_r.data);
        let mut g = a.final_norm.backward(p, &tape.final_nc, &g, &mut grads);

        for b in (0..a.blocks.len()).rev() {
            if let Some(t) = a.transitions.get(b) {
                let tt = &tape.transitions[b];
                let dh = pool::avg_pool2_ceil_backward(&g, tape.block_dims[b]);
                let mut dr = t.conv.backward(p, &tt.r, &dh, &mut grads, true).unwrap();
                relu_backward_inplace(&mut dr.data, &tt.r.data);
                g = t.norm.backward(p, &tt.nc, &dr, &mut grads);
            }
            g = self.dense_block_backward(&a.blocks[b], &tape.blocks[b], g, &mut grads);
        }

        let mut dr = a.stem_pool.backward(&tape.stem_r, &tape.stem_pooled, &g);
        relu_backward_inplace(&mut dr.data, &tape.stem_r.data);
        let dh = a.stem_norm.backward(p, &tape.stem_nc, &dr, &mut grads);
        a.stem_conv.backward(p, &tape.stem_in, &dh, &mut grads, false);
        grads
    }

    fn dense_block_backward(&self, block: &DenseBlock, tapes: &[LayerTape<T>], mut gbuf: Feat<T>, grads: &mut Grads<T>) -> Feat<T> {
        let p = &self.params;
        for (l, layer) in block.layers.iter().enumerate().rev() {
            let t = &tapes[l];
            let cin = block.in_channels + l * block.growth;
            let dy = gbuf.channel_slice(cin, block.growth);
            let mut dr2 = layer.conv2.backward(p, &t.r2, &dy, grads, true).unwrap();
            relu_backward_inplace(&mut dr2.data, &t.r2.data);
            let dh = layer.norm2.backward(p, &t.nc2, &dr2, grads);
            let mut dr1 = layer.conv1.backward(p, &t.r1, &dh, grads, true).unwrap();
            relu_backward_inplace(&mut dr1.data, &t.r1.data);
            let dx = layer.norm1.backward(p, &t.nc1, &dr1, grads);
            add_into_prefix(&mut gbuf, &dx);
        }
        gbuf.channel_slice(0, block.in_channels)
    }
}

impl MultiTaskModel<f32> {
    /// Backbone-only checkpoint (for transfer to a new model).
    pub fn backbone_checkpoint(&self) -> Checkpoint {
        self.checkpoint_filtered(CheckpointKind::Backbone, |name| name.starts_with(BACKBONE_PREFIX))
    }

    /// Checkpoint with every parameter and the age offset.
    pub fn full_checkpoint(&self) -> Checkpoint {
        self.checkpoint_filtered(CheckpointKind::Full, |_| true)
    }

    fn checkpoint_filtered(&self, kind: CheckpointKind, keep: impl Fn(&str) -> bool) -> Checkpoint {
        Checkpoint {
            kind,
            config: self.config.clone(),
            age_offset: self.age_offset,
            tensors: self
                .params
                .entries()
                .iter()
                .filter(|e| keep(&e.name))
                .cloned()
                .collect(),
        }
    }

    /// Replaces backbone weights with those of `ckpt`; heads keep their current values.
    pub fn load_backbone_weights(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let diff = self.config.diff(&ckpt.config);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff.join(", ")));
        }
        let mut loaded = 0;
        for t in ckpt.tensors.iter().filter(|t| t.name.starts_with(BACKBONE_PREFIX)) {
            self.copy_tensor(t)?;
            loaded += 1;
        }
        let expected = self
            .params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(BACKBONE_PREFIX))
            .count();
        if loaded != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {loaded} backbone tensors, model expects {expected}"
            )));
        }
        Ok(())
    }

    /// Rebuilds a model from a full checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Full {
            return Err(Error::Checkpoint("expected a full-model checkpoint".into()));
        }
        let mut model = Self::build(&ckpt.config, 0)?;
        if ckpt.tensors.len() != model.params.entries().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                ckpt.tensors.len(),
                model.params.entries().len()
            )));
        }
        for t in &ckpt.tensors {
            model.copy_tensor(t)?;
        }
        model.age_offset = ckpt.age_offset;
        Ok(model)
    }

    fn copy_tensor(&mut self, t: &crate::nn::NamedArray<f32>) -> Result<()> {
        let id = self
            .params
            .find(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", t.name)))?;
        let entry = self.params.entry(id);
        if entry.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                t.name, t.shape, entry.shape
            )));
        }
        self.params.get_mut(id).copy_from_slice(&t.data);
        Ok(())
    }
}

/// Builds an `f32` model (the training precision).
pub fn build_model(config: &BackboneConfig, seed: u64) -> Result<MultiTaskModel<f32>> {
    MultiTaskModel::build(config, seed)
}

pub fn parameter_count<T: Scalar>(model: &MultiTaskModel<T>) -> usize {
    model.parameter_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            variant: Variant::TinyDensenet3d,
            init_features: 4,
            growth_rate: 2,
            block_layers: [1, 2, 1, 1],
            bn_size: 2,
            stem_kernel: 3,
            input_shape: [16, 16, 16],
        }
    }

    fn volume(shape: [usize; 3], seed: u64) -> Volume {
        let n = shape.iter().product::<usize>();
        Volume::new(shape, (0..n).map(|i| ((i as f64 * 0.37 + seed as f64).sin()) as f32).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&small_config(), 5).unwrap();
        let b = build_model(&small_config(), 5).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_model(&small_config(), 6).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn too_small_input_is_rejected() {
        let cfg = BackboneConfig {
            input_shape: [15, 16, 16],
            ..small_config()
        };
        let err = build_model(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("minimum is 16x16x16"), "{err}");
    }

    #[test]
    fn head_parameter_count_is_f_plus_one() {
        let m = build_model(&small_config(), 0).unwrap();
        let f = m.feature_dim();
        let heads: usize = m
            .params()
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("head.dx"))
            .map(|e| e.data.len())
            .sum();
        assert_eq!(heads, f + 1);
    }

    #[test]
    fn zero_heads_output_zero() {
        let mut m = build_model(&small_config(), 0).unwrap();
        m.zero_heads();
        let v = volume([16, 16, 16], 1);
        let out = m.forward_volumes(&[&v, &v]).unwrap();
        assert!(out.age.iter().chain(&out.sex_logit).chain(&out.dx_logit).all(|&x| x == 0.0));
    }

    #[test]
    fn outputs_follow_batch_permutation() {
        let m = build_model(&small_config(), 0).unwrap();
        let (a, b, c) = (volume([16; 3], 1), volume([16; 3], 2), volume([16; 3], 3));
        let fwd = m.forward_volumes(&[&a, &b, &c]).unwrap();
        let rev = m.forward_volumes(&[&c, &a, &b]).unwrap();
        assert_eq!(fwd.dx_logit[0], rev.dx_logit[1]);
        assert_eq!(fwd.dx_logit[1], rev.dx_logit[2]);
        assert_eq!(fwd.age[2], rev.age[0]);
    }

    #[test]
    fn shape_mismatch_and_non_finite_rejected() {
        let m = build_model(&small_config(), 0).unwrap();
        assert!(m.forward_volumes(&[&volume([16, 16, 17], 0)]).is_err());
        let mut v = volume([16; 3], 0);
        v.set(0, 0, 0, f32::INFINITY);
        assert!(m.forward_volumes(&[&v]).is_err());
    }

    #[test]
    fn feature_dim_is_independent_of_input_shape() {
        let a = build_model(&small_config(), 0).unwrap();
        let b = build_model(&BackboneConfig { input_shape: [20, 24, 18], ..small_config() }, 0).unwrap();
        let fa = a.features(&a.batch_from_volumes(&[&volume([16; 3], 0)]).unwrap()).unwrap();
        let fb = b.features(&b.batch_from_volumes(&[&volume([20, 24, 18], 0)]).unwrap()).unwrap();
        assert_eq!(fa.len(), fb.len());
    }

    #[test]
    fn backbone_transfer_keeps_fresh_heads() {
        let src = build_model(&small_config(), 1).unwrap();
        let mut dst = build_model(&small_config(), 2).unwrap();
        let heads_before: Vec<_> = dst.params().entries().iter().filter(|e| e.name.starts_with("head.")).cloned().collect();
        dst.load_backbone_weights(&src.backbone_checkpoint()).unwrap();
        for e in dst.params().entries() {
            if e.name.starts_with(BACKBONE_PREFIX) {
                let id = src.params().find(&e.name).unwrap();
                assert_eq!(src.params().get(id), e.data.as_slice());
            }
        }
        let heads_after: Vec<_> = dst.params().entries().iter().filter(|e| e.name.starts_with("head.")).cloned().collect();
        assert_eq!(heads_before, heads_after);
        assert_eq!(dst.backbone_checkpoint().tensors, src.backbone_checkpoint().tensors);
    }

    #[test]
    fn transfer_across_variants_fails_with_field_list() {
        let tiny = build_model(&BackboneConfig::tiny([16, 16, 16]), 0).unwrap();
        let other = BackboneConfig {
            growth_rate: 3,
            ..small_config()
        };
        let mut m = build_model(&other, 0).unwrap();
        let err = m.load_backbone_weights(&tiny.backbone_checkpoint()).unwrap_err().to_string();
        assert!(err.contains("growth_rate") && err.contains("init_features"), "{err}");
    }
}
