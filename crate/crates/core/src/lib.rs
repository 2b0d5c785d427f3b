pub mod analysis;
pub mod cli;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod graph;
pub mod models;
pub mod rbf;
pub mod sim;

pub use error::{Error, Result};
