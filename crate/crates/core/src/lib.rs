pub mod audio;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod pipelines;
pub mod synthcorpus;
pub mod tensor;
pub mod variants;

pub use error::{Error, Result};
