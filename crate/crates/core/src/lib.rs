//! Discrete codes for structured token sequences, learnt contrastively, and a
//! transformer decoder that writes variations from them.
//!
//! The guide in `book/` walks through each part with runnable examples.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cpc;
pub mod decoder;
pub mod distilled;
pub mod error;
pub mod generator;
pub mod nn;
pub mod numerics;
pub mod quantizer;

pub use error::{Error, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    pub mod corpus {}
    #[doc = include_str!("../../../book/src/quantizer.md")]
    pub mod quantizer {}
    #[doc = include_str!("../../../book/src/attention.md")]
    pub mod attention {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    pub mod encoder {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    pub mod decoder {}
    #[doc = include_str!("../../../book/src/generation.md")]
    pub mod generation {}
    #[doc = include_str!("../../../book/src/distilled.md")]
    pub mod distilled {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
