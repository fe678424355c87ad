//! Minimal CPU tensor engine: 3D convolution, group normalization and pooling
//! with hand-written backward passes, generic over `f32`/`f64`.

pub mod conv;
pub mod direct;
pub mod norm;
pub mod params;
pub mod pool;
pub mod scalar;
pub mod tensor;

pub use conv::Conv3d;
pub use norm::GroupNorm;
pub use params::{Grads, NamedArray, ParamId, ParamStore};
pub use pool::MaxPool3d;
pub use scalar::Scalar;
pub use tensor::{Feat, FeatView};
