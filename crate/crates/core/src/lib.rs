pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod tensor;

pub use autodiff::{grad_check, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub mod backbone;
pub mod params;
pub mod coattention;
pub mod erase;
pub mod head;
pub mod data;
pub mod config;
pub mod instrument;
pub mod train;
pub mod cam;
pub mod ablate;
