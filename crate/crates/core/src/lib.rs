pub mod cli;
pub mod contrastive;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod leads;
pub mod pipeline;
pub mod reconstruction;
pub mod synth;
pub mod tensor;
pub mod wfdb;

pub use error::{Error, ErrorCategory, Result};
