//! File formats, pipeline orchestration and the `expertforge` command line
//! on top of `expertforge-core`.

pub mod cli;
pub mod config;
pub mod cot;
pub mod error;
pub mod fixture;
pub mod io;
pub mod moe_io;
pub mod pipeline;

pub use error::{ForgeError, Result};
