#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod campaign;
pub mod cbf;
pub mod error;
pub mod grid;
pub mod learner;
pub mod oracle;
pub mod rng;
pub mod session;
pub mod sim;
pub mod socp;
pub mod utility;

pub use error::{Error, Result};
