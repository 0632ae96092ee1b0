//! The multi-task pointer-decoding transformer.

mod checkpoint;
mod config;
mod net;
mod params;

pub use config::ModelConfig;
pub use net::{Ctx, EncoderOutput, Model};
pub use params::{ParamId, ParamStore};
