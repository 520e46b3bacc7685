pub mod cli;
pub mod error;
pub mod evalkit;
pub mod mfe;
pub mod mft;
pub mod model;
pub mod netpbm;
pub mod objective;
pub mod pedmix;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
