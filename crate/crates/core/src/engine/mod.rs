//! Dense tensor compute: kernels, layer descriptions, parameters, and the
//! forward/backward model contract.

pub mod layer;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;

pub use layer::{LayerKind, LayerSpec};
pub use model::{BackwardOptions, ForwardResult, Model, OutputGrad, ProbeSet};
pub use params::{sgd_step, GradientStore, ParamEntry, ParamStore};
pub use tensor::Tensor;
