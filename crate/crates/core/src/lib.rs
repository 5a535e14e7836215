// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cci;
pub mod dataset;
pub mod error;
pub mod kernelstats;
pub mod linalg;
pub mod nfivae;
pub mod pcgraph;
pub mod pipeline;
pub mod screening;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};

// The guide's code listings run as doctests, one module per chapter.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/datasets.md")]
mod book_datasets {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/independence.md")]
mod book_independence {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/screening.md")]
mod book_screening {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/nfivae.md")]
mod book_nfivae {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cci.md")]
mod book_cci {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/skeletons.md")]
mod book_skeletons {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/synthetic.md")]
mod book_synthetic {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
mod book_pipeline {}
