//! Linearizability testing for REST services.

pub mod checker;
pub mod cli;
pub mod datagen;
pub mod executor;
pub mod fixture;
pub mod history;
pub mod model;
pub mod spec_model;
pub mod testkit;
pub mod workload;
