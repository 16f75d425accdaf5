pub mod autodiff;
pub mod codec;
pub mod config;
pub mod eval;
pub mod graph;
pub mod model;
pub mod retrieval;
pub mod selftest;
pub mod synth;
pub mod tabular;
pub mod train;
