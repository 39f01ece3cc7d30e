//! Late prompt tuning on a miniature frozen transformer encoder.
//!
//! The crate bundles everything needed to study soft prompts inserted at an
//! intermediate layer of a frozen backbone: a small autodiff tape with an
//! explicit recording switch ([`tensor`]), a pre-LN encoder with an MLM head
//! ([`encoder`]), the prompt family itself ([`prompting`]), task templates
//! and verbalizers ([`tasks`]), the training loop ([`engine`]), and the
//! measurement tools ([`analysis`]).

pub mod analysis;
pub mod encoder;
pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod prompting;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
