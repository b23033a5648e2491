//! Memory-polynomial (parallel-Hammerstein) nonlinear canceler.
//!
//! The linear stage removes everything an FIR filter can explain; what
//! remains is dominated by power-amplifier distortion and modulator image
//! products. Those are polynomial in the transmit samples, so this stage
//! regresses the residual onto the monomial basis
//! `x[n-m]^q · conj(x[n-m])^{p-q}` for odd orders `p ≤ P` and delays
//! `m < M`, and solves the same least-squares problem as the linear stage —
//! just with a wider, nonlinear design matrix.
//!
//! Only odd total orders appear in the basis: even-order products of a
//! passband signal land far from the carrier and vanish in baseband. The
//! purely linear column (`p = 1, q = 1`) is excluded by default since a
//! dedicated linear stage has already claimed it; the conjugate column
//! (`p = 1, q = 0`) stays, because modulator imbalance leaks exactly that
//! term and no linear-in-`x` filter can model it.
//!
//! # Example
//!
//! ```rust
//! use sic_core::linear_canceler::{fit_linear, predict_linear, residual};
//! use sic_core::poly_canceler::{fit_poly, predict_poly, PolyBasisSpec};
//! use sic_core::signals::{generate_dataset, DatasetConfig};
//!
//! let mut cfg = DatasetConfig::default_with_seed(4);
//! cfg.n_samples = 8192;
//! let (tx, rx) = generate_dataset(&cfg).unwrap();
//!
//! // Stage 1: linear fit. Stage 2: polynomial fit on what's left.
//! let taps = fit_linear(&tx, &rx, 13).unwrap();
//! let after_linear = residual(&rx, &predict_linear(&tx, &taps).unwrap()).unwrap();
//! let spec = PolyBasisSpec { order: 5, memory: 13, ..PolyBasisSpec::default() };
//! let poly = fit_poly(&tx, &after_linear, &spec).unwrap();
//! let after_poly = residual(&after_linear, &predict_poly(&tx, &poly).unwrap()).unwrap();
//!
//! assert!(after_poly.mean_power() < after_linear.mean_power() / 10.0);
//! ```

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::linear_canceler::{ls_fit, BasisLabel, RegressorMatrix};
use crate::signals::{monomial, ComplexSignal};
use crate::{Result, SicError};

/// Describes which monomial columns the polynomial regressor contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyBasisSpec {
    /// Highest nonlinearity order `P`; odd, ≥ 1.
    pub order: usize,
    /// Memory depth `M` in taps; ≥ 1.
    pub memory: usize,
    /// Include the plain linear column `x[n-m]` (order 1, direct). Off by
    /// default: in the two-stage arrangement the linear canceler owns it.
    pub include_linear: bool,
    /// Rescale each column to unit RMS before solving and fold the scale
    /// back into the coefficients. Costs nothing in accuracy and keeps the
    /// high-order columns (whose raw magnitudes differ by orders of
    /// magnitude) from dominating the conditioning.
    pub normalize_columns: bool,
}

impl Default for PolyBasisSpec {
    fn default() -> Self {
        Self {
            order: 5,
            memory: 13,
            include_linear: false,
            normalize_columns: true,
        }
    }
}

impl PolyBasisSpec {
    /// Validates the order/memory combination.
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.order % 2 == 0 {
            return Err(SicError::InvalidConfig(format!(
                "polynomial order must be odd and positive, got {}",
                self.order
            )));
        }
        if self.memory == 0 {
            return Err(SicError::InvalidConfig("memory depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of monomial kinds per delay tap.
    ///
    /// Summing `p + 1` choices of `q` over odd `p ≤ P` gives
    /// `((P+1)/2)·((P+1)/2 + 1)` terms; dropping the plain linear one leaves
    /// one fewer. For `P = 5` that is 11 without the linear column.
    pub fn kinds_per_tap(&self) -> usize {
        let half = (self.order + 1) / 2;
        let all = half * (half + 1);
        if self.include_linear {
            all
        } else {
            all - 1
        }
    }

    /// Total column count `M · kinds_per_tap`.
    pub fn n_columns(&self) -> usize {
        self.memory * self.kinds_per_tap()
    }

    /// Iterates the basis labels in column order: lexicographic by
    /// `(p, q, m)` — order-1 terms first, then cubic, and so on.
    pub fn labels(&self) -> impl Iterator<Item = BasisLabel> + '_ {
        (1..=self.order)
            .step_by(2)
            .flat_map(move |p| {
                (0..=p).flat_map(move |q| {
                    (0..self.memory).map(move |m| (p, q, m))
                })
            })
            .filter(move |&(p, q, _)| self.include_linear || !(p == 1 && q == 1))
            .map(|(p, q, m)| BasisLabel::Monomial {
                delay: m,
                power: q,
                conj_power: p - q,
            })
    }
}

/// Estimated polynomial-stage coefficients, paired with their basis labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyCoeffs {
    /// The basis the coefficients live in.
    pub spec: PolyBasisSpec,
    /// One coefficient per basis column, in [`PolyBasisSpec::labels`] order.
    pub coeffs: Vec<Complex64>,
    /// Column labels, kept alongside for reporting and prediction.
    pub labels: Vec<BasisLabel>,
}

/// Builds the monomial design matrix for a polynomial fit.
///
/// Row `n`, column `j` holds `x[n-m]^q · conj(x[n-m])^{p-q}` for the `j`-th
/// label of the spec, with zero-padded history. Column normalization is NOT
/// applied here — [`fit_poly`] handles that internally so the matrix always
/// contains raw basis values.
pub fn build_ph_regressor(x: &ComplexSignal, spec: &PolyBasisSpec) -> Result<RegressorMatrix> {
    spec.validate()?;
    if x.len() < spec.memory {
        return Err(SicError::SignalTooShort {
            needed: spec.memory,
            got: x.len(),
        });
    }
    let labels: Vec<BasisLabel> = spec.labels().collect();
    let mut entries = nalgebra::DMatrix::zeros(x.len(), labels.len());
    for (j, label) in labels.iter().enumerate() {
        let BasisLabel::Monomial {
            delay,
            power,
            conj_power,
        } = *label
        else {
            unreachable!("polynomial spec only emits monomial labels");
        };
        for n in 0..x.len() {
            entries[(n, j)] = monomial(x.delayed(n, delay), power as u32, conj_power as u32);
        }
    }
    Ok(RegressorMatrix {
        entries,
        column_labels: labels,
    })
}

/// Fits the polynomial stage to a target signal (normally the residual left
/// by the linear stage) by least squares.
///
/// When the spec asks for column normalization, each column is scaled to
/// unit RMS before the solve and the inverse scale is folded into the
/// returned coefficients, so the result always applies to raw monomials.
pub fn fit_poly(
    x: &ComplexSignal,
    target: &ComplexSignal,
    spec: &PolyBasisSpec,
) -> Result<PolyCoeffs> {
    let mut regressor = build_ph_regressor(x, spec)?;
    if target.len() != regressor.n_rows() {
        return Err(SicError::LengthMismatch {
            context: "regressor rows and target".into(),
            left: regressor.n_rows(),
            right: target.len(),
        });
    }

    let scales: Vec<f64> = if spec.normalize_columns {
        let n = regressor.n_rows() as f64;
        (0..regressor.n_cols())
            .map(|j| {
                let rms = (regressor.entries.column(j).norm_squared() / n).sqrt();
                if rms > 0.0 {
                    rms
                } else {
                    1.0
                }
            })
            .collect()
    } else {
        vec![1.0; regressor.n_cols()]
    };
    for (j, &s) in scales.iter().enumerate() {
        if s != 1.0 {
            regressor
                .entries
                .column_mut(j)
                .scale_mut(1.0 / s);
        }
    }

    let solution = ls_fit(&regressor, target)?;
    let coeffs = solution
        .coeffs
        .iter()
        .zip(&scales)
        .map(|(c, s)| c / s)
        .collect();
    Ok(PolyCoeffs {
        spec: *spec,
        coeffs,
        labels: regressor.column_labels,
    })
}

/// Evaluates the fitted polynomial stage on a transmit signal.
pub fn predict_poly(x: &ComplexSignal, poly: &PolyCoeffs) -> Result<ComplexSignal> {
    if x.len() < poly.spec.memory {
        return Err(SicError::SignalTooShort {
            needed: poly.spec.memory,
            got: x.len(),
        });
    }
    if poly.coeffs.len() != poly.labels.len() {
        return Err(SicError::ShapeMismatch(format!(
            "{} coefficients for {} labels",
            poly.coeffs.len(),
            poly.labels.len()
        )));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for (label, &c) in poly.labels.iter().zip(&poly.coeffs) {
        let BasisLabel::Monomial {
            delay,
            power,
            conj_power,
        } = *label
        else {
            return Err(SicError::ShapeMismatch(
                "polynomial coefficients carry a non-monomial label".into(),
            ));
        };
        for (n, o) in out.iter_mut().enumerate() {
            *o += c * monomial(x.delayed(n, delay), power as u32, conj_power as u32);
        }
    }
    ComplexSignal::new(out, x.sample_rate_hz)
}

/// Convenience: `X·c` through the prediction routine must match the matrix
/// product; exposed for tests and the pipeline code.
pub fn predict_from_regressor(
    regressor: &RegressorMatrix,
    coeffs: &[Complex64],
) -> Result<Vec<Complex64>> {
    if coeffs.len() != regressor.n_cols() {
        return Err(SicError::ShapeMismatch(format!(
            "{} coefficients for {} columns",
            coeffs.len(),
            regressor.n_cols()
        )));
    }
    let v = &regressor.entries * DVector::from_column_slice(coeffs);
    Ok(v.iter().copied().collect())
}
