//! Numerical verification laboratory for seedless device-independent
//! randomness extraction from Bell tests.
//!
//! - [`bell`]: binary measurements, the CHSH functional and the shifted CHSH operator.
//! - [`extractor`]: XOR and table extractors, Walsh–Hadamard certification and search.
//! - [`sim`]: tripartite states, classical-quantum outputs and trace-distance bounds.
//! - [`protocol`]: the spot-checking protocol, honest devices and output lengths.
//! - [`rates`]: asymptotic rate optimization and minimum-CHSH curves.

pub mod bell;
pub mod error;
pub mod extractor;
pub mod linalg;
pub mod protocol;
pub mod rates;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
