//! Distributed optimization with doubly encoded, error-diminishing quantization.
//!
//! Workers and a center exchange only Elias-gamma coded integer grids whose
//! error budget shrinks geometrically, so the iterates converge at the same
//! linear rate as the unquantized method while the total number of bits
//! stays finite per digit of accuracy.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bitstream;
pub mod distributed;
pub mod error;
pub mod harness;
pub mod problems;
pub mod quantizer;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
