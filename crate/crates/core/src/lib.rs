pub mod autodiff;
pub mod cost;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Shape, Tensor};
