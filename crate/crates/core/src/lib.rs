//! PPMamba: a pyramid-pooling, omnidirectional selective-scan network for
//! semantic segmentation, with the tensor and autodiff machinery it needs.

pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod oss;
pub mod params;
pub mod ppssm;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamSpec, ParamStore, Params};
pub use tensor::{DType, Element, Fill, Float, Tensor};
