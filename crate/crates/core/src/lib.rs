#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coefficient_map;
pub mod commutator;
pub mod corrector;
pub mod error;
pub mod fft;
pub mod gaussian_field;
pub mod grid;
pub mod malliavin;
pub mod parallel;

pub use error::{Error, Result};
pub use grid::LatticeGrid;
pub mod statistics;
