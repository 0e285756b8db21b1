//! Pipeline-parallel schedule simulator with K-FAC work packed into pipeline bubbles.

pub mod bubblefill;
pub mod cli;
pub mod config;
pub mod error;
pub mod kfac;
pub mod perfmodel;
pub mod schedule;
pub mod trace;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
