//! Training and evaluation of neural one-step emulators for chaotic
//! dynamical systems, regularized by optimal-transport losses in a learned
//! summary space.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`autodiff`]) over dense `f64` tensors, ground-truth simulators for
//! Lorenz-63, Lorenz-96 and Kuramoto-Sivashinsky ([`dynamics`]), entropic
//! optimal transport with a debiased Sinkhorn divergence ([`ot`]), network
//! architectures with Lipschitz estimation ([`models`]), the adversarial
//! training loop ([`training`]), and an evaluation/verification suite
//! ([`metrics`]).

pub mod autodiff;
pub mod dynamics;
pub mod fft;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod ot;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Activation, GradCheckReport, Tape, Var};
pub use dynamics::{NoiseSpec, SystemSpec, SystemTag, Trajectory};
pub use models::ModelParams;
pub use ot::PointCloud;
pub use tensor::Tensor;
pub use training::{Method, TrainConfig, TrainLog};

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unsupported size: {0}")]
    UnsupportedSize(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
