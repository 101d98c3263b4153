//! Experiment harness behind the `nowcast` binary.

pub mod config;
pub mod data_cmd;
pub mod evaluate;
pub mod models;
pub mod plot;
pub mod run;
pub mod train;
