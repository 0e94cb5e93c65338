//! A lightweight single-shot object detector built from Front and Tinier
//! modules, with optional multi-scale feature fusion.
//!
//! The crate covers the whole pipeline on the CPU: tensor kernels, network
//! graphs for the three variants, box decoding and NMS, a trainer with
//! hand-written gradients, detection scoring, and the file formats used by the
//! `mffd` command-line tool.

mod error;

pub mod detect;
pub mod eval;
pub mod io;
pub mod netgraph;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

// The guide's snippets run as doctests; one module per chapter so a failure
// points at its page.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
