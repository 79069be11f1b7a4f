pub mod cli;
pub mod cost;
pub mod dataset;
pub mod engine;
pub mod gnn;
pub mod knn;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod vae;
pub mod vit;
