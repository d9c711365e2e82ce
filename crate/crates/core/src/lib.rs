pub mod autograd;
pub mod can;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod tensor;
pub mod verify;

pub use autograd::{Gradients, ParamId, Tape, Var};
pub use error::{Error, Result};
pub use kernels::Conv2dSpec;
pub use params::{ParamRole, ParamStore};
pub use tensor::{DType, Element, Tensor};
