pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
pub mod dataio;
pub mod maskgen;
pub mod models;
pub mod losses;
pub mod archive;
pub mod optim;
pub mod trainer;
pub mod metrics;
pub mod verify;
