//! Desk-scale sequence-to-sequence training stack built around a pair of
//! Transformer views — a deep main network (M-Net) and a shallower sub
//! network (S-Net) — that share parameter storage and are trained jointly,
//! optionally with a hinge regularizer on the gap between their sequence
//! log-likelihoods.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff
//! engine ([`tensor`]), the encoder-decoder model ([`model`]), the sharing
//! machinery ([`symbiosis`]), losses/optimizer/training loop ([`train`]),
//! synthetic translation tasks ([`data`]), beam search and BLEU
//! ([`decode`]), and a CLI harness ([`run`], `symnet` binary).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod model;
pub mod run;
pub mod symbiosis;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

// tensor buffers churn through large short-lived allocations; mimalloc
// recycles them instead of handing pages back to the kernel every drop
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
