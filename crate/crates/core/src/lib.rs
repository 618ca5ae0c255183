pub mod archive;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod network;
pub mod oplib;
pub mod optim;
pub mod par;
pub mod patchops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
