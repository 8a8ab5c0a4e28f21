//! Lattice statics of straight dislocations in multilattice crystals.
//!
//! The pipeline: build the projected multilattice and stencil ([`lattice`]),
//! bind a site potential ([`potential`]), derive the Cauchy–Born blocks and
//! elastic tensor ([`cbmodel`]), construct the far-field predictor
//! ([`predictor`]), relax the core corrector ([`energy`], [`solver`]) and fit
//! decay and convergence rates ([`analysis`]).

pub mod analysis;
pub mod cbmodel;
pub mod energy;
pub mod error;
pub mod fft;
pub mod lattice;
pub mod potential;
pub mod predictor;
pub mod solver;

pub use error::{Error, Result};
