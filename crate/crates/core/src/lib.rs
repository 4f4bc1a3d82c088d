//! Micro-level loss reserving.
//!
//! A two-task recurrent network predicts, for every open claim and future
//! development period, the probability of a non-zero payment and its amount.
//! Around it sit a synthetic portfolio generator, a chain-ladder benchmark,
//! a peaks-over-threshold model that reinstates large payments, and the
//! evaluation metrics used to compare all of them.

pub mod baseline;
pub mod diffcore;
pub mod domain;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod net;
pub mod persist;
pub mod preprocess;
pub mod synthgen;
pub mod tail;
pub mod train;

pub use error::{Error, Result};
