//! Classification service, load generator and operator CLI on top of
//! `adrag-core`.

pub mod cli;
pub mod config;
pub mod http;
pub mod loadgen;
pub mod metrics;
pub mod state;
