//! Single object tracking that fuses a conventional camera with an event
//! camera.
//!
//! The crate bundles a scene simulator, event-frame aggregation, a small
//! reverse mode autodiff library, the alignment and fusion network, a
//! Siamese tracker with an IoU head, and tracking metrics. The guide in
//! `book/` walks through each part.

pub mod afnet;
pub mod bbox;
pub mod error;
pub mod eval;
pub mod events;
pub mod gradsuite;
pub mod image;
pub mod sequence;
pub mod simulator;
pub mod tracker;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/events.md")]
    mod events {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
