//! Pure algorithmic core for the MOAT hybrid convolution/attention model family.
//!
//! Everything here runs without `std`: dense NHWC tensors, a tape-based
//! reverse-mode autodiff engine, the layer library, the MBConv / Transformer /
//! MOAT blocks with their ablation variants, the five-stage model zoo, the
//! static parameter/FLOP cost model, and the desk-scale training recipe.
//! File formats and the command-line driver live in the companion `moat` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autodiff::{OpKind, Tape, Var};
pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
