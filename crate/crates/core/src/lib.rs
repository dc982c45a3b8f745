//! Transformer-based direct speech-to-speech translation with pseudo
//! translation labeling.

pub mod audio;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod run;
pub mod train;
