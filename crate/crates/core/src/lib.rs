pub mod agr;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod permute;
pub mod pipeline;
pub mod schedule;
pub mod stats;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
