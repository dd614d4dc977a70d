#![cfg_attr(not(feature = "std"), no_std)]
//! Continuous-time forecasting of sparsely observed, externally controlled
//! stochastic processes with piecewise-linear SDE dynamics in spectral form.

extern crate alloc;

pub mod error;
pub mod esde;
pub mod filter;
pub mod linalg;
pub mod nets;
pub mod oracle;
pub mod real;
pub mod seeds;
pub mod serde_float;
pub mod spectral;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
