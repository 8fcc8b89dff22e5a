pub mod activation;
pub mod cli;
pub mod attention;
pub mod autodiff;
pub mod complexity;
pub mod conv;
pub mod data;
pub mod depthwise;
pub mod error;
pub mod model;
pub mod position;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
