//! Digital self-interference (SI) cancellation for full-duplex transceivers.
//!
//! A full-duplex radio transmits and receives on the same frequency at the
//! same time, so its own transmit signal leaks into its receiver many tens of
//! dB above the signal it is trying to hear. After the antenna and analog
//! stages have done what they can, the digital baseband sees a residual that
//! is mostly a *known* function of the transmitted samples: a linear multipath
//! component plus weaker nonlinear products of the transmit chain (IQ mixer
//! image, power-amplifier distortion). This crate models that leakage and
//! subtracts it.
//!
//! The canceler is a two-stage structure: a least-squares linear filter is
//! fitted first, and a nonlinear stage — either a memory-polynomial basis or
//! a small neural network — is fitted to what the linear stage leaves behind.
//!
//! Modules:
//!
//! - [`signals`] — complex baseband containers, the transmit-impairment chain
//!   (IQ imbalance, parallel-Hammerstein nonlinearities), synthetic dataset
//!   generation and file I/O.
//! - [`linear_canceler`] — delay-line regressor construction and the QR
//!   least-squares solve.
//! - [`poly_canceler`] — odd-order memory-polynomial basis on top of the same
//!   solver.
//! - [`nn_engine`] — a minimal real-valued neural-network engine (dense,
//!   2-D convolution, simple recurrence), reverse-mode gradients, and five
//!   optimizers.
//! - [`architectures`] — the canceler network topologies assembled from
//!   engine layers, named presets, and the two-stage fitting pipeline.
//! - [`complexity`] — closed-form FLOP and parameter counts for every
//!   canceler kind, for cost/benefit tables.
//! - [`metrics`] — cancellation ratio in dB, mean-squared error, and Welch
//!   power-spectral-density estimation.
//!
//! # Example
//!
//! ```rust
//! use sic_core::architectures::{fit_pipeline, preset, FitOptions};
//! use sic_core::metrics::evaluate_canceler;
//! use sic_core::signals::{generate_dataset, split_dataset, DatasetConfig};
//!
//! // Synthesize a short capture with the default impairment chain.
//! let mut cfg = DatasetConfig::default_with_seed(7);
//! cfg.n_samples = 4096;
//! let (tx, rx) = generate_dataset(&cfg).unwrap();
//! let (tx_tr, rx_tr, tx_te, rx_te) = split_dataset(&tx, &rx, 0.9).unwrap();
//!
//! // Fit the two-stage canceler with the polynomial nonlinear stage.
//! let poly = preset("poly_p5").unwrap();
//! let fit = fit_pipeline(&tx_tr, &rx_tr, &tx_te, &rx_te, &poly.arch, &FitOptions::default()).unwrap();
//! let report = evaluate_canceler(&fit.pipeline, &tx_te, &rx_te).unwrap();
//! assert!(report.total_db > 40.0);
//! ```

pub mod architectures;
pub mod complexity;
pub mod linear_canceler;
pub mod metrics;
pub mod nn_engine;
pub mod poly_canceler;
pub mod signals;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum SicError {
    /// A signal with zero samples was passed where samples are required.
    #[error("empty signal")]
    EmptySignal,

    /// Paired signals or tensors whose lengths must agree do not.
    #[error("length mismatch: {context} ({left} vs {right})")]
    LengthMismatch {
        context: String,
        left: usize,
        right: usize,
    },

    /// A signal is shorter than the model memory it is being used with.
    #[error("signal too short: need at least {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },

    /// A model or layer was constructed with inconsistent settings.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The regressor is rank-deficient beyond what ridge regularization
    /// can absorb.
    #[error("ill-conditioned regressor")]
    IllConditioned,

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// The reference SI signal has zero power, so a cancellation ratio is
    /// undefined.
    #[error("zero SI power")]
    ZeroSiPower,

    /// File contents did not parse as the documented format.
    #[error("parse error: {0}")]
    Parse(String),

    /// Underlying file-system failure.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// A preset or architecture name that this crate does not define.
    #[error("unknown name: {0}")]
    UnknownName(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SicError>;
