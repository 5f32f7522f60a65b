//! The guide's chapters as module docs, so `cargo test --doc` runs every
//! code block in book/src. One module per chapter keeps failures traceable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/flows.md")]
pub mod flows {}
#[doc = include_str!("../../../book/src/guidance.md")]
pub mod guidance {}
#[doc = include_str!("../../../book/src/reasoner.md")]
pub mod reasoner {}
#[doc = include_str!("../../../book/src/grpo.md")]
pub mod grpo {}
#[doc = include_str!("../../../book/src/baseline.md")]
pub mod baseline {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/runner.md")]
pub mod runner {}
