//! Runs the guide's code snippets as doc-tests, keeping `book/` and the
//! crate in lockstep: a snippet that stops compiling fails `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors-and-autodiff.md")]
pub mod tensors_and_autodiff {}

#[doc = include_str!("../../../book/src/attention-similarity.md")]
pub mod attention_similarity {}

#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}

#[doc = include_str!("../../../book/src/baselines.md")]
pub mod baselines {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli-and-formats.md")]
pub mod cli_and_formats {}
