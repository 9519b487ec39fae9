//! Chapters of the ktree book, compiled so their listings run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/embeddings.md")]
pub mod embeddings {}

#[doc = include_str!("../../../book/src/kmeans.md")]
pub mod kmeans {}

#[doc = include_str!("../../../book/src/tree.md")]
pub mod tree {}

#[doc = include_str!("../../../book/src/beam_search.md")]
pub mod beam_search {}

#[doc = include_str!("../../../book/src/pairwise.md")]
pub mod pairwise {}

#[doc = include_str!("../../../book/src/baselines.md")]
pub mod baselines {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
