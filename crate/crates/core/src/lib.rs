//! Hamiltonian Monte Carlo with automatic Euclidean metric selection.
//!
//! During warmup each adaptation window builds a set of candidate metrics
//! (diagonal, dense, and low-rank Hessian-based ones) and keeps the one whose
//! leapfrog-stability criterion is smallest on held-out draws.

pub mod criterion;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod sampler;
pub mod targets;
pub mod warmup;

pub use criterion::{Candidate, CandidateSet, SelectionReport};
pub use error::{Error, Result};
pub use metrics::Metric;
pub use targets::TargetDensity;
