pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod probing;
pub mod seqmodels;
pub mod training;

pub use error::{Error, Result};

