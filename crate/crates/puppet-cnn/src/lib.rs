//! Self-contained engine for complexity-adaptive generated CNNs: a small
//! recurrent generator produces every convolution kernel of the executed
//! network, with per-image depth and parameter adaptation, trained
//! end-to-end by tape-based reverse-mode differentiation.

pub mod analysis;
pub mod cli;
pub mod complexity;
pub mod error;
pub mod puppet;
pub mod puppeteer;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
