//! Learned surrogates for AC optimal power flow.
//!
//! The crate is organised bottom-up:
//!
//! * [`network`]: case data model and MATPOWER / native readers
//! * [`powerflow`]: branch flows, balance residuals, bound excesses, cost
//! * [`surrogate`]: the bounded-output MLP, its losses and exact gradients
//! * [`labeler`]: a local AC OPF solver used to produce labels and baselines
//! * [`training`]: alternating weight descent and multiplier ascent
//! * [`pipeline`]: datasets, splits, evaluation reports and studies

pub mod fixtures;
pub mod network;
pub mod powerflow;
pub mod labeler;
pub mod surrogate;
pub mod training;
pub mod pipeline;
