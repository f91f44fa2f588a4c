pub mod bsde;
pub mod error;
pub mod export;
pub mod fbm;
pub mod forward;
pub mod girsanov;
pub mod harness;
pub mod problem;
pub mod quad;
pub mod regression;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
