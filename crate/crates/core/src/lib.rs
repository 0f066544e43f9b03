pub mod ablation;
pub mod ccnn;
pub mod checkpoint;
pub mod config;
pub mod ceaef;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod supervision;
pub mod tensor;
pub mod train;

pub use ablation::AblationConfig;
pub use ccnn::{CcnnConfig, CcnnMode, CcnnState};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Mode, Var};
pub use kernels::ConvSpec;
pub use model::{BimiiNet, ModelConfig};
pub use params::NamedTensorSet;
pub use tensor::{Scalar, Tensor};
