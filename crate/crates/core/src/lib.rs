pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod spline;
pub mod tensor;
pub mod training;
pub mod weights;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
