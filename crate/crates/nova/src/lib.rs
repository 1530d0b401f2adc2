//! Entropy-guided acceleration for next-scale autoregressive generation.
//!
//! This crate implements a training-free token-reduction pipeline on top of a
//! deterministic toy next-scale transformer: per-scale predictive entropy is
//! tracked online, the inflection of its growth curve decides when to start
//! pruning, sigmoid scale-linkage and entropy-deviation layer-linkage set a
//! distinct reduction ratio per (scale, layer), low-entropy tokens are pruned
//! and reconstructed from an interpolated residual cache, and an exact flop
//! ledger quantifies the saved work against a dense baseline.
//!
//! Modules follow the pipeline: [`numerics`] (matrices, grids, the seeded
//! generator and the instrumented flop counter), [`model`] (the toy
//! transformer), [`entropy`] (token/scale entropy and inflection detection),
//! [`schedule`] (reduction-ratio schedules), [`prune`] (token selection and
//! residual cache reuse) and [`engine`] (full generation runs, the ledger and
//! run comparison). [`defaults`] pins the desk-scale configuration golden
//! files assume, and [`output`] renders reports to portable byte formats.

pub mod defaults;
pub mod entropy;
pub mod error;
pub mod model;
pub mod numerics;
pub mod output;
pub mod prune;
pub mod schedule;

pub mod engine;

pub use error::{NovaError, Result};
