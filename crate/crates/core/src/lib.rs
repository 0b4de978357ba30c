//! Risk-monitoring core for continuously adapting classifiers.
//!
//! Everything in this crate is allocation-light arithmetic over plain slices
//! and runs without `std`:
//!
//! - [`losses`]: bounded per-sample losses (0-1, Brier) and unsupervised
//!   loss proxies (uncertainty, energy, prototype distance).
//! - [`confseq`]: the static Hoeffding upper interval used for the source
//!   risk and the conjugate-mixture empirical-Bernstein lower confidence
//!   sequence used for every running test bound.
//! - [`calibration`]: F1-maximizing selection of the loss threshold `tau`
//!   and the per-step proxy thresholds.
//! - [`monitor`]: the supervised oracle, unsupervised, quantile and naive
//!   plugin alarms, plus the assumption diagnostic.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod calibration;
pub mod confseq;
mod error;
pub mod losses;
pub mod monitor;
pub mod special;

pub use error::{Error, Result};
