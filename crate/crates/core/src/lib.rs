pub mod cli;
pub mod config;
pub mod data;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
