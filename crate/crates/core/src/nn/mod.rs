//! Dense tensors, reverse-mode autodiff and the layers the model is built from.

pub mod adam;
pub mod backbone;
pub mod graph;
pub mod params;
pub mod tensor;
pub mod weights;

pub use adam::{step_decay, Adam, AdamConfig};
pub use backbone::{Backbone, BackboneKind, ConvBackbone, MlpHead};
pub use graph::{sigmoid, softplus, Graph, NodeId, STD_POOL_EPS};
pub use params::{Gradients, ParamSet};
pub use tensor::{Scalar, Tensor};
pub use weights::WeightFile;
