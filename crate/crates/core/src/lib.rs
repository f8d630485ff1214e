pub mod analysis;
pub mod augment;
pub mod baselines;
pub mod cli;
pub mod clustering;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod harness;
pub mod io;
pub mod model;
pub mod nn;
pub mod perturbation;
pub mod surrogate;
pub mod tensor;
pub mod train;
