pub mod config;
pub mod cost;
pub mod exec;
pub mod migration;
pub mod model;
pub mod placement;
pub mod predictor;
pub mod scheduler;
pub mod sim;
pub mod trace;
