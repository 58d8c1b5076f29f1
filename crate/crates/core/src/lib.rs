//! Matched difference-in-differences survival analysis of help-giving after
//! receiving an answer on a Q&A platform.

pub mod covariates;
pub mod coxfit;
pub mod design;
pub mod error;
pub mod events;
pub mod matching;
pub mod pipeline;
pub mod report;
pub mod simulate;
pub mod windows;

pub use error::{Error, Result};
