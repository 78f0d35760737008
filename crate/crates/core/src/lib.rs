pub mod error;
pub mod estimation;
pub mod experiment;
pub mod likelihood;
pub mod model;
pub mod priors;
pub mod probability;
pub mod regions;
pub mod rng;
pub mod sampling;
