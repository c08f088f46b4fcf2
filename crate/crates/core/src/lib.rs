#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod anomaly;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod field;
mod math;
pub mod objectives;
pub mod ode;
pub mod optim;
pub mod paths;
pub mod rng;
pub mod trace;
pub mod tensor;
pub mod train;

pub use autodiff::{vjp, Gradients, Tape, Var, Variable};
pub use error::{Error, Result};
pub use tensor::Tensor;
