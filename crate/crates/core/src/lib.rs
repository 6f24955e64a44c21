// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod demo;
pub mod error;
pub mod gpr;
pub mod io;
pub mod oracle;
pub mod par;
pub mod propagate;
pub mod surrogate;

pub use error::{Error, Result};
