pub mod cli;
pub mod cohort;
pub mod diagnostics;
pub mod engine;
pub mod glm;
pub mod models;
pub mod rng;
pub mod stats;
pub mod strategy;
pub mod synth;
