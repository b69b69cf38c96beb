//! Conservation-corrected neural PDE surrogates at desk scale.
//!
//! The crate provides:
//! - dense grid fields with a radix-2 FFT and a reverse-mode tape ([`field`],
//!   [`fft`], [`tape`]),
//! - exact correction operators for linear and quadratic conservation laws,
//!   plus the projection and penalty baselines ([`conservation`]),
//! - desk-scale neural operators (1D spectral, 2D circular CNN) with learnable
//!   correction-coefficient generators ([`models`]),
//! - reference solvers and dataset generation for the benchmark PDEs
//!   ([`pdegen`], [`dataset`]),
//! - the Adam training loop, evaluation, and the lambda sweep ([`training`]),
//! - checkpoint and run-config formats ([`checkpoint`], [`config`]).

pub mod checkpoint;
pub mod config;
pub mod conservation;
pub mod dataset;
pub mod fft;
pub mod field;
pub mod models;
pub mod pdegen;
pub mod tape;
pub mod training;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("length {len} is not a power of two")]
    NotPowerOfTwo { len: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("solver instability at step {step}: |u| = {value:.3e}")]
    SolverInstability { step: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
