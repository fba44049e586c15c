//! Binarized Siamese change detection.
//!
//! The crate provides bit-packed ±1 tensors with an XNOR-PopCount inner
//! product ([`bitpack`]), 1-bit convolutions trained with a clipped
//! straight-through estimator ([`binconv`]), a desk-scale Siamese change
//! detection network ([`model`]), training-only auxiliary alignment modules
//! ([`auxobj`]), the information-bottleneck style training objective
//! ([`objective`]), discrete mutual-information diagnostics ([`miplane`]),
//! a synthetic change-pair generator with a NetPBM loader ([`synthdata`]) and
//! the optimisation loop with checkpointing ([`trainer`]).

pub mod auxobj;
pub mod binconv;
pub mod bitpack;
pub mod conv;
pub mod error;
pub mod miplane;
pub mod model;
pub mod netpbm;
pub mod objective;
pub mod ops;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod threads;
pub mod trainer;

pub use error::{BicdError, Result};
pub use tensor::{MaskTensor, Real, RealTensor, Tensor};
