//! A desk-scale laboratory for knowledge-grounded cross-lingual encoder
//! pre-training.
//!
//! The pipeline, end to end:
//!
//! 1. [`kb`] — parse dump-format corpus/KB files into a validated
//!    [`kb::KnowledgeBase`], or generate a synthetic multilingual world.
//! 2. [`text`] — build a vocabulary and turn the KB into tokenized training
//!    instances for three objectives: masked entity prediction (MEP), object
//!    entailment (OE), and masked language modeling (MLM).
//! 3. [`encoder`] — a small transformer encoder with shared weights across
//!    all task inputs, a relation embedding table, four two-layer projection
//!    heads, and a weight-tied MLM head, on top of the reverse-mode tape in
//!    [`autodiff`].
//! 4. [`queue`] — the fixed-capacity FIFO candidate list of detached
//!    embeddings used as contrastive negatives.
//! 5. [`objectives`] — the per-task losses and their unweighted joint sum.
//! 6. [`trainer`] — Adam with linear warmup/decay, queue maintenance,
//!    bit-exact checkpoint/resume, and the queue-size sweep.
//! 7. [`probe`] — post-training evaluation: cloze P@1, entity/object ranking
//!    over description pools, and cross-lingual description retrieval.
//!
//! The `xlmk` binary in this crate is a thin wrapper over [`cli::dispatch`];
//! the runnable programs under `examples/` exercise each capability through
//! the library API directly.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod kb;
pub mod objectives;
pub mod probe;
pub mod queue;
pub mod rng;
pub mod text;
pub mod trainer;

pub use error::{Result, XlmkError};
