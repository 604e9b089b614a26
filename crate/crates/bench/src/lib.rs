//! Experiment harness for `svrg-core`: libsvm IO, experiment specs, a
//! parallel runner, trace output and the `svrg` command line tool.

pub mod cli;
pub mod experiment;
pub mod libsvm;
pub mod output;
pub mod rates;
pub mod reference;
pub mod spec;
