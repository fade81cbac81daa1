pub mod bubbletea;
pub mod comm;
pub mod config;
pub mod dp;
pub mod engine;
pub mod error;
pub mod export;
pub mod fixtures;
pub mod metrics;
pub mod schedule;
pub mod select;
pub mod topology;
pub mod units;
pub mod workload;
