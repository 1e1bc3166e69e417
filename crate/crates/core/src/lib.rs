pub mod baseline;
pub mod cache;
pub mod config;
pub mod experiment;
pub mod gflownet;
pub mod landscape;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod simulator;
pub mod space;
