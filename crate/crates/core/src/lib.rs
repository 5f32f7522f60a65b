// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::single_range_in_vec_init)]

pub mod arbaseline;
pub mod envs;
pub mod error;
pub mod evaluate;
pub mod flowlat;
pub mod guidance;
pub mod numcore;
pub mod reasoner;
pub mod rl;
pub mod textpol;
pub mod tokens;

pub use error::{Error, Result};
