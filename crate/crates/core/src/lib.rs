pub mod autodiff;
pub mod embodiment;
pub mod error;
pub mod flow;
pub mod gym;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{InitScheme, InitSpec, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub type Model32 = model::HrdtModel<f32>;
pub type Model64 = model::HrdtModel<f64>;
