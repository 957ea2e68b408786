//! Sparse interpolated mixture-of-experts upcycling for small decoder-only models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod export;
pub mod gates;
pub mod layer;
pub mod model;
pub mod optim;
pub mod report;
pub mod router;
pub mod training;
pub mod upcycle;

pub use error::{Error, Result};
