pub mod config;
pub mod dataset;
pub mod experiment;
pub mod synth;
