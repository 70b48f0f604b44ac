//! Experiment orchestration for the federated PEFT simulator: config
//! parsing with overrides, cached backbone pretraining, single runs,
//! sweeps, and summary emission. The `c2a` binary is a thin wrapper over
//! this library.

pub mod config;
pub mod runner;
pub mod sweep;

#[cfg(test)]
pub(crate) mod test_support;
