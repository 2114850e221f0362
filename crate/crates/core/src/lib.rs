//! Positivity diagnostics for longitudinal data: regression trees find
//! covariate-defined subgroups whose treatment (or censoring) probability is
//! extreme, per time point and under static or dynamic intervention rules.

pub mod bounds;
pub mod cli;
pub mod dataset;
mod par;
pub mod port;
pub mod report;
pub mod rules;
pub mod simgen;
pub mod sport;
pub mod tree;

pub use par::with_threads;
