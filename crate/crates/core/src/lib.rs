//! Tabular preference-optimization lab.
//!
//! An order-k softmax policy trained offline on preference triples with a
//! family of pairwise objectives, plus the diagnostics used to compare them.

pub mod error;
pub mod seed;
pub mod policy;
pub mod objectives;
pub mod data;
pub mod trainer;
pub mod metrics;
pub mod gradcheck;
pub mod manifest;
pub mod cli;

pub use error::{Error, Result};
pub use objectives::{ObjectiveConfig, ObjectiveKind};
pub use policy::{TabularPolicy, Token, Vocab};
