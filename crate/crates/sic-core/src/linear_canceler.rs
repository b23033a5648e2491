//! Linear least-squares self-interference canceler.
//!
//! The workhorse first stage: model the received interference as an FIR
//! function of the known transmit samples, `ŷ[n] = Σ_m h[m]·x[n-m]`, and pick
//! the taps that minimize `Σ|y[n] - ŷ[n]|²` over a training capture. With the
//! regressor matrix `X` (one row per sample, one column per delay) the
//! minimizer is the least-squares solution of `X·h ≈ y`, solved here by QR
//! factorization rather than the normal equations so that conditioning is
//! only that of `X`, not `X^H X`.
//!
//! The same [`ls_fit`] routine also serves the polynomial canceler, which
//! builds a wider regressor out of nonlinear basis columns but solves the
//! identical problem.
//!
//! # Example
//!
//! ```rust
//! use num_complex::Complex64;
//! use sic_core::linear_canceler::{fit_linear, predict_linear};
//! use sic_core::signals::{apply_ph_model, ComplexSignal, PhChannel};
//!
//! // A two-tap channel and a short excitation.
//! let ch = PhChannel::new(1, 2).unwrap()
//!     .with_coeff(0, 1, 1, Complex64::new(0.5, -0.1)).unwrap()
//!     .with_coeff(1, 1, 1, Complex64::new(0.2, 0.3)).unwrap();
//! let x = ComplexSignal::new(
//!     (0..64).map(|n| Complex64::new((n as f64 * 0.7).sin(), (n as f64 * 1.3).cos())).collect(),
//!     1.0,
//! ).unwrap();
//! let y = apply_ph_model(&x, &ch).unwrap();
//!
//! let taps = fit_linear(&x, &y, 2).unwrap();
//! let reconstructed = predict_linear(&x, &taps).unwrap();
//! let err: f64 = y.samples.iter().zip(&reconstructed.samples)
//!     .map(|(a, b)| (a - b).norm_sqr()).sum();
//! assert!(err < 1e-20);
//! ```

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::signals::ComplexSignal;
use crate::{Result, SicError};

/// Condition-number estimate above which the QR route is abandoned for a
/// ridge-regularized solve.
const CONDITION_LIMIT: f64 = 1e12;

/// Relative ridge weight used in the fallback: `λ = RIDGE_SCALE · tr(X^H X)/K`.
const RIDGE_SCALE: f64 = 1e-10;

/// Identifies what a regressor column contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisLabel {
    /// Plain delayed sample `x[n-m]`.
    Tap(usize),
    /// Nonlinear term `x[n-delay]^power · conj(x[n-delay])^conj_power`.
    Monomial {
        /// Delay `m` in samples.
        delay: usize,
        /// Direct exponent `q`.
        power: usize,
        /// Conjugate exponent `p - q`.
        conj_power: usize,
    },
}

/// A design matrix ready for least squares: one row per output sample, one
/// column per basis function, plus labels saying what each column is.
#[derive(Debug, Clone)]
pub struct RegressorMatrix {
    /// `N × K` complex design matrix.
    pub entries: DMatrix<Complex64>,
    /// One label per column, same order as the matrix.
    pub column_labels: Vec<BasisLabel>,
}

impl RegressorMatrix {
    /// Number of rows (output samples).
    pub fn n_rows(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of basis columns.
    pub fn n_cols(&self) -> usize {
        self.entries.ncols()
    }
}

/// FIR taps estimated by the linear canceler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTaps {
    /// `taps[m]` multiplies `x[n-m]`.
    pub taps: Vec<Complex64>,
}

impl LinearTaps {
    /// Memory depth `M` covered by the taps.
    pub fn memory(&self) -> usize {
        self.taps.len()
    }
}

/// Outcome of a least-squares solve, with conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct LsSolution {
    /// Estimated coefficients, one per regressor column.
    pub coeffs: Vec<Complex64>,
    /// Rough condition number of `X^H X` (squared ratio of extreme `R`
    /// diagonal magnitudes from the QR factorization).
    pub condition_estimate: f64,
    /// Ridge weight actually applied, if the fallback path ran.
    pub ridge_lambda: Option<f64>,
}

/// Builds the delay-line regressor for a linear fit.
///
/// Row `n`, column `m` holds `x[n-m]`; indices before the first sample read
/// as zero, matching the convention of the channel models, so a canceler
/// trained on this matrix reconstructs those models exactly.
///
/// # Arguments
/// * `x` - transmit signal.
/// * `memory` - number of delay taps `M` (columns); `1 ≤ M ≤ x.len()`.
pub fn build_linear_regressor(x: &ComplexSignal, memory: usize) -> Result<RegressorMatrix> {
    if memory == 0 {
        return Err(SicError::InvalidConfig("memory depth must be at least 1".into()));
    }
    if x.len() < memory {
        return Err(SicError::SignalTooShort {
            needed: memory,
            got: x.len(),
        });
    }
    let entries = DMatrix::from_fn(x.len(), memory, |n, m| x.delayed(n, m));
    let column_labels = (0..memory).map(BasisLabel::Tap).collect();
    Ok(RegressorMatrix {
        entries,
        column_labels,
    })
}

/// Solves `min_h ‖X·h - y‖²` for a (generally overdetermined) regressor.
///
/// The primary path is a thin QR factorization of `X`. If the triangular
/// factor indicates a condition number of `X^H X` above `1e12`, the solver
/// falls back to ridge-regularized normal equations
/// `(X^H X + λI)·h = X^H y` with `λ = 1e-10 · tr(X^H X)/K` and prints a
/// warning to stderr, so near-collinear basis sets degrade gracefully
/// instead of returning garbage taps.
///
/// # Arguments
/// * `regressor` - design matrix with at least as many rows as columns.
/// * `y` - target signal, one sample per row.
pub fn ls_fit(regressor: &RegressorMatrix, y: &ComplexSignal) -> Result<LsSolution> {
    let x = &regressor.entries;
    let (n, k) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(SicError::LengthMismatch {
            context: "regressor rows and target".into(),
            left: n,
            right: y.len(),
        });
    }
    if n < k {
        return Err(SicError::InvalidConfig(format!(
            "underdetermined fit: {n} samples for {k} coefficients"
        )));
    }

    let y_vec = DVector::from_column_slice(&y.samples);

    let qr = x.clone().qr();
    let r = qr.r();
    let (mut r_max, mut r_min) = (0.0_f64, f64::INFINITY);
    for i in 0..k {
        let d = r[(i, i)].norm();
        r_max = r_max.max(d);
        r_min = r_min.min(d);
    }
    // cond(X^H X) = cond(X)², and the R diagonal ratio estimates cond(X).
    let condition_estimate = if r_min > 0.0 {
        (r_max / r_min).powi(2)
    } else {
        f64::INFINITY
    };

    if condition_estimate <= CONDITION_LIMIT {
        let rhs = qr.q().ad_mul(&y_vec);
        let coeffs = r
            .solve_upper_triangular(&rhs)
            .ok_or(SicError::IllConditioned)?;
        return Ok(LsSolution {
            coeffs: coeffs.iter().copied().collect(),
            condition_estimate,
            ridge_lambda: None,
        });
    }

    // Fallback: ridge-regularized normal equations.
    let gram = x.ad_mul(x);
    let trace: f64 = (0..k).map(|i| gram[(i, i)].re).sum();
    let lambda = RIDGE_SCALE * trace / k as f64;
    let mut damped = gram;
    for i in 0..k {
        damped[(i, i)] += Complex64::new(lambda, 0.0);
    }
    let rhs = x.ad_mul(&y_vec);
    let coeffs = damped
        .cholesky()
        .ok_or(SicError::IllConditioned)?
        .solve(&rhs);
    eprintln!(
        "warning: regressor condition ~{condition_estimate:.2e} exceeds {CONDITION_LIMIT:.0e}; \
         applied ridge weight {lambda:.3e}"
    );
    Ok(LsSolution {
        coeffs: coeffs.iter().copied().collect(),
        condition_estimate,
        ridge_lambda: Some(lambda),
    })
}

/// Convenience wrapper: build the delay regressor and fit it in one call.
pub fn fit_linear(x: &ComplexSignal, y: &ComplexSignal, memory: usize) -> Result<LinearTaps> {
    let regressor = build_linear_regressor(x, memory)?;
    let solution = ls_fit(&regressor, y)?;
    Ok(LinearTaps {
        taps: solution.coeffs,
    })
}

/// Reconstructs the interference a set of taps predicts for a transmit
/// signal: `ŷ[n] = Σ_m taps[m]·x[n-m]`, zero-padded history.
pub fn predict_linear(x: &ComplexSignal, taps: &LinearTaps) -> Result<ComplexSignal> {
    if taps.taps.is_empty() {
        return Err(SicError::InvalidConfig("no taps to predict with".into()));
    }
    if x.len() < taps.memory() {
        return Err(SicError::SignalTooShort {
            needed: taps.memory(),
            got: x.len(),
        });
    }
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for (m, &h) in taps.taps.iter().enumerate() {
        for (n, o) in out.iter_mut().enumerate() {
            if n >= m {
                *o += h * x.samples[n - m];
            }
        }
    }
    ComplexSignal::new(out, x.sample_rate_hz)
}

/// Element-wise residual `y - ŷ`, the signal left after cancellation.
pub fn residual(y: &ComplexSignal, y_hat: &ComplexSignal) -> Result<ComplexSignal> {
    if y.len() != y_hat.len() {
        return Err(SicError::LengthMismatch {
            context: "target and prediction".into(),
            left: y.len(),
            right: y_hat.len(),
        });
    }
    let samples = y
        .samples
        .iter()
        .zip(&y_hat.samples)
        .map(|(a, b)| a - b)
        .collect();
    ComplexSignal::new(samples, y.sample_rate_hz)
}
