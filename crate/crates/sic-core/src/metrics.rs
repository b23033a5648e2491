//! Cancellation metrics and spectral estimation.
//!
//! The figure of merit for a canceler is the self-interference power ratio
//! before and after subtraction, in dB. This module computes it, estimates
//! power spectra by Welch averaging (to show *where* in the band the
//! interference went), and wraps both in [`evaluate_canceler`], the one-call
//! scorer for a fitted pipeline on held-out data.
//!
//! # Steady-state evaluation
//!
//! A canceler with memory `M` predicting the first `M−1` samples of a
//! capture segment reaches back before the segment's first sample, where it
//! sees zero padding. On the training capture that padding is real — the
//! stream genuinely starts there — but a held-out segment is a mid-stream
//! continuation: its leading samples carry history the canceler was never
//! given, so including them caps any measurement at the segment-to-transient
//! power ratio no matter how good the fit is. [`evaluate_canceler`]
//! therefore skips the first `M−1` samples of the segment it scores.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::architectures::CancelerPipeline;
use crate::complexity::complexity_of;
use crate::signals::ComplexSignal;
use crate::{Result, SicError};

/// Self-interference suppression in dB: `10·log10(P_before / P_after)`.
///
/// `before` is the raw received interference, `after` the residual once the
/// replica is subtracted. Higher is better; identical inputs give exactly
/// 0 dB. A residual of exactly zero returns `+∞` (a warning is printed,
/// since real captures never cancel perfectly); zero input power is an
/// error because the ratio is meaningless.
pub fn cancellation_db(before: &ComplexSignal, after: &ComplexSignal) -> Result<f64> {
    if before.len() != after.len() {
        return Err(SicError::LengthMismatch {
            context: "cancellation inputs".into(),
            left: before.len(),
            right: after.len(),
        });
    }
    let p_before: f64 = before.samples.iter().map(|s| s.norm_sqr()).sum();
    let p_after: f64 = after.samples.iter().map(|s| s.norm_sqr()).sum();
    if p_before <= 0.0 {
        return Err(SicError::ZeroSiPower);
    }
    if p_after == 0.0 {
        eprintln!("warning: residual is exactly zero; reporting infinite cancellation");
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (p_before / p_after).log10())
}

/// Mean squared complex error between two equal-length signals:
/// `Σ|a−b|²/N`.
pub fn mean_squared_error(a: &ComplexSignal, b: &ComplexSignal) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SicError::LengthMismatch {
            context: "mse inputs".into(),
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        / a.len() as f64)
}

// ---------------------------------------------------------------------------
// Welch spectral estimation
// ---------------------------------------------------------------------------

/// Taper applied to each Welch segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann taper, the default for spectral display.
    Hann,
    /// No taper. Exact power bookkeeping when segments tile the signal.
    Rectangular,
}

impl WindowKind {
    fn sample(self, n: usize, len: usize) -> f64 {
        match self {
            WindowKind::Rectangular => 1.0,
            WindowKind::Hann => {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
            }
        }
    }
}

/// Welch averaging parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdConfig {
    /// FFT length per segment.
    pub segment_length: usize,
    /// Fractional overlap between consecutive segments, `0.0 ≤ f < 1.0`.
    pub overlap: f64,
    /// Segment taper.
    pub window: WindowKind,
}

impl Default for PsdConfig {
    fn default() -> Self {
        Self {
            segment_length: 1024,
            overlap: 0.5,
            window: WindowKind::Hann,
        }
    }
}

/// A Welch power-spectrum estimate over the full complex band.
///
/// `power` is linear per-bin power normalized so the bins of a
/// rectangular-window, zero-overlap estimate sum to the signal's mean
/// power (discrete Parseval). Bins are centered on DC: `freqs_hz` runs
/// from `−fs/2` up to `+fs/2 − fs/N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    /// Bin center frequencies, Hz, ascending.
    pub freqs_hz: Vec<f64>,
    /// Linear per-bin power, same length as `freqs_hz`.
    pub power: Vec<f64>,
    /// Number of segments averaged.
    pub segments: usize,
    /// The parameters the estimate was computed with.
    pub config: PsdConfig,
}

impl PsdEstimate {
    /// Per-bin power in dB (`10·log10`), clamped at −400 dB for empty bins.
    pub fn power_db(&self) -> Vec<f64> {
        self.power
            .iter()
            .map(|&p| if p > 0.0 { 10.0 * p.log10() } else { -400.0 })
            .collect()
    }
}

/// Estimates the power spectrum of a complex baseband signal by Welch's
/// method: overlapping windowed segments, periodogram per segment,
/// average across segments, DC-centered output.
pub fn psd_welch(x: &ComplexSignal, cfg: &PsdConfig) -> Result<PsdEstimate> {
    let len = cfg.segment_length;
    if len < 2 {
        return Err(SicError::InvalidConfig(
            "segment length must be at least 2".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(SicError::InvalidConfig(format!(
            "overlap fraction {} must be in [0, 1)",
            cfg.overlap
        )));
    }
    if x.len() < len {
        return Err(SicError::SignalTooShort {
            needed: len,
            got: x.len(),
        });
    }
    let hop = ((len as f64) * (1.0 - cfg.overlap)).round().max(1.0) as usize;
    let window: Vec<f64> = (0..len).map(|n| cfg.window.sample(n, len)).collect();
    let window_energy: f64 = window.iter().map(|w| w * w).sum();

    let fft = FftPlanner::new().plan_fft_forward(len);
    let mut acc = vec![0.0f64; len];
    let mut buf = vec![Complex64::default(); len];
    let mut segments = 0usize;
    let mut start = 0usize;
    while start + len <= x.len() {
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = x.samples[start + i] * window[i];
        }
        fft.process(&mut buf);
        for (slot, v) in acc.iter_mut().zip(&buf) {
            *slot += v.norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    debug_assert!(segments > 0, "guarded by the length check above");

    // |X_w[k]|² / (N · Σw²), averaged over segments: for a rectangular
    // window this makes Σ_k power equal the (windowed) mean signal power.
    let scale = 1.0 / (segments as f64 * len as f64 * window_energy);

    let half = len / 2;
    let bin_hz = x.sample_rate_hz / len as f64;
    let mut freqs_hz = Vec::with_capacity(len);
    let mut power = Vec::with_capacity(len);
    for i in 0..len {
        // DC-centered: position i holds original FFT bin (i + N − N/2) mod N.
        let k = (i + len - half) % len;
        freqs_hz.push((i as f64 - half as f64) * bin_hz);
        power.push(acc[k] * scale);
    }
    Ok(PsdEstimate {
        freqs_hz,
        power,
        segments,
        config: *cfg,
    })
}

// ---------------------------------------------------------------------------
// Pipeline scoring
// ---------------------------------------------------------------------------

/// Everything [`evaluate_canceler`] measures for one fitted pipeline on one
/// capture segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CancellationReport {
    /// Suppression from the linear stage alone, dB.
    pub linear_only_db: f64,
    /// Suppression from the full pipeline, dB.
    pub total_db: f64,
    /// Mean squared complex error of the full replica on the scored region.
    pub mse: f64,
    /// Samples excluded from the front of the segment (the canceler's
    /// memory warm-up).
    pub skipped: usize,
    /// Stored real parameters of the architecture.
    pub params: usize,
    /// Real FLOPs per cancelled sample.
    pub flops: usize,
}

/// Scores a fitted pipeline on a capture segment, skipping the first
/// `memory − 1` samples (see the module docs on steady-state evaluation).
pub fn evaluate_canceler(
    pipeline: &CancelerPipeline,
    tx: &ComplexSignal,
    rx: &ComplexSignal,
) -> Result<CancellationReport> {
    if tx.len() != rx.len() {
        return Err(SicError::LengthMismatch {
            context: "capture tx and rx".into(),
            left: tx.len(),
            right: rx.len(),
        });
    }
    let skip = pipeline.memory.saturating_sub(1);
    if rx.len() <= skip {
        return Err(SicError::SignalTooShort {
            needed: skip + 1,
            got: rx.len(),
        });
    }

    let linear = pipeline.linear_prediction(tx)?;
    let full = pipeline.predict(tx)?;

    let tail = |s: &ComplexSignal| -> Result<ComplexSignal> {
        ComplexSignal::new(s.samples[skip..].to_vec(), s.sample_rate_hz)
    };
    let rx_tail = tail(rx)?;
    let lin_res = crate::linear_canceler::residual(&rx_tail, &tail(&linear)?)?;
    let full_tail = tail(&full)?;
    let full_res = crate::linear_canceler::residual(&rx_tail, &full_tail)?;

    Ok(CancellationReport {
        linear_only_db: cancellation_db(&rx_tail, &lin_res)?,
        total_db: cancellation_db(&rx_tail, &full_res)?,
        mse: mean_squared_error(&rx_tail, &full_tail)?,
        skipped: skip,
        params: complexity_of(&pipeline.arch)?.params,
        flops: complexity_of(&pipeline.arch)?.flops,
    })
}
