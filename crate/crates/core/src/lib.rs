//! Unified mixture-of-experts decoder where attention and FFN sublayers draw
//! from one expert bank through pre-mixing attention.

pub mod analysis;
pub mod blocks;
pub mod config;
pub mod error;
pub mod experts;
pub mod mixing;
pub mod profiler;
pub mod router;
pub mod runtime;
pub mod tensor;

pub use config::{count_params, preset, ModelConfig, ParamCount, Preset};
pub use error::{Result, UmoeError};
pub use tensor::{Matrix, Real};
