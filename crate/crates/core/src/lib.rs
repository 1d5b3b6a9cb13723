// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locate where a labeled property of the input becomes readable inside a
//! transformer: difference maps and probe sweeps over every layer and head,
//! a small `f64` decoder with LoRA to run them against, and reports.
//!
//! The guide in `book/` walks through the pipeline.

pub mod activation_store;
pub mod cli;
pub mod diff_analysis;
pub mod error;
pub mod extraction;
pub mod fixtures;
pub mod micro_transformer;
pub mod probe_engine;
pub mod report;
pub mod seed;

pub use error::{Error, Result};

// Book chapters, compiled so their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/activations.md")]
    mod activations {}
    #[doc = include_str!("../../../book/src/diff-maps.md")]
    mod diff_maps {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/fine-tuning.md")]
    mod fine_tuning {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
