//! Statistical model of a compound nucleus with slow phase relaxation between
//! spin classes: amplitude ensembles, t-matrix correlators, observables, DDX
//! analysis and wavefunction-correlation diagnostics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod ddxkit;
pub mod density;
pub mod error;
pub mod levels;
pub mod linalg;
pub mod microensemble;
pub mod observables;
pub mod rng;
pub mod smatrix;
pub mod stats;

pub use error::{Error, Result};
