//! Experiment harness: configuration, the synthetic 2-hop task, model
//! training and evaluation, verification suites, and report writing.

pub mod compare;
pub mod config;
pub mod model;
pub mod suites;
pub mod synthetic;
pub mod train;
