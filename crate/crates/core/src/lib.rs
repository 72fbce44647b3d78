//! Coronary dominance classification from cine sequences: frame quality
//! gating, a tiny CNN trained with noise-robust weighted losses, logit-sum
//! voting, metrics and the cross-validation experiment harness.

pub mod aggregate;
pub mod config;
pub mod frameselect;
pub mod dataio;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod nnet;
pub mod report;
pub mod rng;
pub mod synthgen;
