//! Hierarchical text-to-item-to-sequence recommender with a bias-free item
//! projection head, a generative beam-search baseline, and the evaluation
//! machinery to compare them. `no_std` + `alloc`; file formats, timing and the
//! CLI live in the `llrec` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod generative;
pub mod head;
pub mod item_encoder;
pub mod kernels;
pub mod lite;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod rec_encoder;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
