pub mod autodiff;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lora;

pub use error::{Error, ErrorKind, Result};
