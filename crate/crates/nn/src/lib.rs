//! Minimal CPU neural-network toolkit: a reverse-mode autodiff tape over 4-D
//! tensors, the convolutional architectures used by the dehazing pipeline,
//! Adam, and a binary checkpoint container.

pub mod checkpoint;
pub mod conv;
mod error;
pub mod graph;
pub mod nets;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use conv::ConvGeom;
pub use error::{NnError, Result};
pub use graph::{Graph, Var};
pub use nets::{
    ClassifierSpec, DomainClassifier, Module, PatchDiscriminator, PatchSpec, ResNet, ResNetSpec, UNet, UNetSpec,
};
pub use optim::{Adam, AdamConfig};
pub use params::ParamSet;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
