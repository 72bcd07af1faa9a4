//! Hierarchical collaborative low-rank adaptation for dialog state tracking, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numkit`]: dense matrices, Jacobi SVD/eigensolvers, k-means, softmax and Gumbel sampling
//! - [`autograd`]: a small reverse-mode tape over the operations the encoder needs
//! - [`embed`]: embedding tables (file ingestion or a deterministic toy embedder)
//! - [`cluster`]: spectral joint clustering of domains and slot prompts, silhouette model selection
//! - [`init`]: semantic SVD initialization and the Kaiming / PiSSA / MiLoRA baselines
//! - [`adapter`]: the dual-path adapted linear layer, routing, fusion and inference merging
//! - [`model`]: a compact transformer encoder carrying adapted query/value projections
//! - [`dstsim`]: synthetic dialog corpora, zero-shot splits, JGA/AGA metrics
//! - [`trainer`]: AdamW, the training loop, evaluation and the ablation grid
//! - [`checkpoint`] and [`cli`]: persistence and the command-line surface
//!
//! Runnable walkthroughs live in `examples/`.

pub mod adapter;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod cluster;
pub mod dstsim;
pub mod embed;
mod error;
pub mod init;
pub mod model;
pub mod numkit;
pub mod trainer;

pub use error::{Error, Result};
pub use numkit::{Matrix, RngStream};
