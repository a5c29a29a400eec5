//! Conditional timestep gating for long-range sequence classification.
//!
//! A lightweight selector scores every timestep of a sequence against a
//! bank of learned concept kernels, optionally after a self-attention layer
//! that lets each timestep see the rest of the sequence, and opens a binary
//! gate per timestep. A heavier classifier then runs only on the timesteps
//! whose gates are open.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense tensors.
//! - [`gating`]: concept-kernel similarity, gating MLP, noisy clipped-sigmoid
//!   activation for training, hard step activation for inference, and the
//!   expected-open-gate sparsity penalty.
//! - [`selector`]: per-timestep light encoder, self-attention context layer,
//!   gate pipeline and light/heavy timestep alignment.
//! - [`classifier`]: heavy segment encoder run on selected timesteps only,
//!   spatial and temporal max-pooling and the MLP head.
//! - [`baselines`]: segment-only saliency sampler plus uniform and random
//!   samplers.
//! - [`synthdata`]: synthetic long-range activity datasets whose per-timestep
//!   relevance depends on context.
//! - [`costmodel`]: FLOP accounting and computation/accuracy tradeoff rows.
//! - [`harness`]: training regimes, evaluation, gating reports,
//!   checkpoints and the command-line entry point.

pub mod autodiff;
pub mod baselines;
pub mod classifier;
pub mod costmodel;
pub mod error;
pub mod gating;
pub mod harness;
pub mod nn;
pub mod selector;
pub mod synthdata;

pub use error::{Error, Result};
