//! Selection and mixture-of-experts math for forging task experts from a
//! bank of adapters and an open data pool, steered by a handful of
//! verified examples (the K-shot set).
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO; the
//! `expertforge` crate carries file formats, orchestration and the CLI.
//!
//! * [`scoring`]: perplexity, exact-match accuracy, rank vectors.
//! * [`model_select`]: group diversity and expert selection.
//! * [`data_select`]: cosine/hull/KDE samplers and semantic deduplication.
//! * [`moe`]: linear merging, top-k gating, forward/backward, activation stats.

#![no_std]

extern crate alloc;

pub mod data_select;
pub mod error;
pub mod linalg;
pub mod model_select;
pub mod moe;
pub mod report;
pub mod scoring;
pub mod types;

pub use error::{Error, Result};
pub use report::SelectionReport;
pub use types::{
    EmbeddingMatrix, InstructionSample, ModelRecord, ScoreRecord, ScoreTable, ShotSet, Tensor,
};
