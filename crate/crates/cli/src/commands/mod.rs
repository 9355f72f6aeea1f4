pub mod benchmark;
pub mod infer;
pub mod synth;
pub mod train;
pub mod validate;
