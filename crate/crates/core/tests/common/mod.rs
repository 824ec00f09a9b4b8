#![allow(dead_code)]

pub mod algebra;
pub mod cli_checks;
pub mod fixture;
pub mod grad;
pub mod metric_checks;
pub mod partition_checks;
