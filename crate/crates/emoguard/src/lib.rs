//! File formats, experiment orchestration and reports around
//! [`emoguard_core`].

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod history;
pub mod report;

pub use emoguard_core;
pub use error::{Error, Result};
