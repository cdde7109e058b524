pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod heads;
pub mod ingest;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod synth;
pub mod tensor;
pub mod value;

pub use error::{Error, Result};
