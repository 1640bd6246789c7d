//! Multifidelity Bayesian hyperparameter optimization with a deep-kernel
//! Gaussian-process surrogate that can additionally condition on logged
//! neural-network weight checkpoints.
//!
//! The crate is organized around the pieces of one HPO loop:
//!
//! * [`tape`] — a minimal dense-tensor reverse-mode autodiff core, including
//!   the GP marginal-likelihood primitive used to train the surrogate.
//! * [`weightgraph`] — conversion of weight checkpoints into neuron-level
//!   graphs and their permutation-invariant graph-metanetwork encoding.
//! * [`surrogate`] — the deep-kernel GP: feature extractor, kernel, NLML
//!   fitting and posterior prediction.
//! * [`acquisition`] — multifidelity expected improvement and candidate
//!   proposal with the one-epoch fantasize step.
//! * [`benchhub`] — generation of desk-scale benchmark tables: small target
//!   networks trained over sampled configurations on synthetic tasks, with
//!   per-epoch curves and checkpoints cached on disk.
//! * [`hpo`] — the outer drivers (FMS, DyHPO, ablations, GP and random
//!   baselines) running against a cached benchmark table.
//! * [`metrics`] / [`report`] — rank-correlation and regret evaluation plus
//!   CSV/SVG report emission.
//!
//! Data-parallel inner loops (hub generation, candidate scoring, batched
//! linear algebra, seed fan-out) run on rayon when the default `parallel`
//! feature is enabled and fall back to sequential execution otherwise; both
//! paths produce bit-identical results.

pub mod acquisition;
pub mod adam;
pub mod benchhub;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod hpo;
pub mod linalg;
pub mod metrics;
pub mod report;
pub mod space;
pub mod surrogate;
pub mod tape;
pub mod tensor;
pub mod trace;
pub mod weightgraph;

pub use error::{FmsError, Result};
pub use tensor::Tensor;
