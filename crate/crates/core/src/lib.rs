//! Simulation toolkit for small open quantum systems coupled to bosonic
//! environments beyond the Markov approximation.
//!
//! Units: ħ = k_B = 1. Operators act on column-stacked vectors (see [`linalg`]).

// Negated comparisons reject NaN inputs.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bath;
pub mod chain;
pub mod error;
pub mod exact;
pub mod heom;
pub mod linalg;
pub mod mastereq;
pub mod nonmarkov;
pub mod quad;
pub mod rng;
pub mod stochastic;

pub use error::{Error, Result};
pub use linalg::{DensityMatrix, Operator, SuperOperator, TimeGrid, C64};
