pub mod commands;
pub mod config;
pub mod criteria;
pub mod report;
