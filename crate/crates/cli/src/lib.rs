//! Command-line front end and HTTP service for counterfactual explanations.

pub mod commands;
pub mod data;
pub mod server;
