//! Complex baseband signals and the transmit-impairment chain.
//!
//! Everything downstream of this module works on pairs of signals: the
//! transmitted baseband samples `tx` (which the canceler is allowed to see)
//! and the received self-interference `rx` (which it tries to reconstruct and
//! subtract). This module provides the containers, the impairment models that
//! turn a clean `tx` into a realistic `rx` — IQ modulator imbalance, a
//! memory-polynomial power amplifier, a multipath leakage channel — and the
//! synthetic dataset generator plus CSV/JSON file I/O used by the tools.
//!
//! The nonlinear models are all members of one family: sums of odd-order
//! monomials `x(n-m)^q · conj(x(n-m))^(p-q)` with per-tap memory. The
//! [`PhChannel`] type stores an arbitrary member of that family; the simpler
//! [`HammersteinModel`] (one static nonlinearity followed by one filter) can
//! be converted into it exactly with [`HammersteinModel::to_ph_channel`].
//!
//! # Example
//!
//! ```rust
//! use sic_core::signals::{generate_dataset, DatasetConfig};
//!
//! let mut cfg = DatasetConfig::default_with_seed(1);
//! cfg.n_samples = 2048;
//! let (tx, rx) = generate_dataset(&cfg).unwrap();
//! assert_eq!(tx.len(), rx.len());
//!
//! // The leakage channel sits ~53 dB below the transmit power.
//! let ratio = rx.mean_power() / tx.mean_power();
//! assert!(10.0 * ratio.log10() < -40.0);
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, SicError};

/// Sample rate of the synthetic datasets, in Hz.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 20e6;

// Multicarrier framing used by the synthetic transmit waveform: a 2048-point
// transform at 20 MHz sampling carrying 1024 active carriers (DC left empty)
// occupies roughly 10 MHz, i.e. the band is two-times oversampled. The cyclic
// prefix length only affects the waveform's statistics, not any canceler
// contract, but it is fixed so that a given seed always yields the same
// samples.
const OFDM_FFT_SIZE: usize = 2048;
const OFDM_HALF_ACTIVE: usize = 512; // carriers ±1..=±512 → 1024 active
const OFDM_CP_LEN: usize = 128;

/// A finite complex baseband sequence tagged with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSignal {
    /// Baseband samples, dimensionless amplitude.
    pub samples: Vec<Complex64>,
    /// Sampling rate in Hz; must be positive.
    pub sample_rate_hz: f64,
}

impl ComplexSignal {
    /// Wraps a sample vector, rejecting empty input and non-finite values.
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(SicError::EmptySignal);
        }
        if !sample_rate_hz.is_finite() || sample_rate_hz <= 0.0 {
            return Err(SicError::InvalidConfig(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if let Some(bad) = samples
            .iter()
            .position(|s| !s.re.is_finite() || !s.im.is_finite())
        {
            return Err(SicError::InvalidConfig(format!(
                "non-finite sample at index {bad}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Builds a signal from separate in-phase and quadrature rails.
    pub fn from_iq(i: &[f64], q: &[f64], sample_rate_hz: f64) -> Result<Self> {
        if i.len() != q.len() {
            return Err(SicError::LengthMismatch {
                context: "I and Q rails".into(),
                left: i.len(),
                right: q.len(),
            });
        }
        let samples = i
            .iter()
            .zip(q)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect();
        Self::new(samples, sample_rate_hz)
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// True when the signal holds no samples. Constructed signals never are;
    /// this exists for the usual `len`/`is_empty` pairing.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean of `|x[n]|²` over the signal.
    pub fn mean_power(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    /// Sample at `n - delay` under the zero-padded-history convention used
    /// throughout the crate: indices before the first sample read as zero.
    #[inline]
    pub fn delayed(&self, n: usize, delay: usize) -> Complex64 {
        if n >= delay {
            self.samples[n - delay]
        } else {
            Complex64::new(0.0, 0.0)
        }
    }
}

/// `x^n` by repeated multiplication. Exponents here are tiny (at most the
/// polynomial order), and using one shared routine keeps the model and the
/// regressor columns rounding-identical.
#[inline]
pub(crate) fn int_pow(x: Complex64, n: u32) -> Complex64 {
    let mut acc = Complex64::new(1.0, 0.0);
    for _ in 0..n {
        acc *= x;
    }
    acc
}

/// One memory-polynomial term `x^q · conj(x)^c` evaluated at a single sample.
#[inline]
pub(crate) fn monomial(x: Complex64, q: u32, conj_pow: u32) -> Complex64 {
    int_pow(x, q) * int_pow(x.conj(), conj_pow)
}

/// Transmitter gain/phase imbalance between the I and Q mixer rails.
///
/// The imbalanced output mixes the signal with its own conjugate:
/// `y = ½(1 + ψ·e^{jθ})·x + ½(1 − ψ·e^{jθ})·conj(x)`. A perfectly balanced
/// modulator (`psi = 1`, `theta = 0`) makes the conjugate ("image")
/// coefficient exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqImbalance {
    /// Gain imbalance, dimensionless; must be positive.
    pub psi: f64,
    /// Phase imbalance in radians.
    pub theta: f64,
}

impl IqImbalance {
    /// Validates and stores the imbalance parameters.
    pub fn new(psi: f64, theta: f64) -> Result<Self> {
        if !psi.is_finite() || psi <= 0.0 {
            return Err(SicError::InvalidConfig(format!(
                "gain imbalance must be positive, got {psi}"
            )));
        }
        if !theta.is_finite() {
            return Err(SicError::InvalidConfig("phase imbalance must be finite".into()));
        }
        Ok(Self { psi, theta })
    }

    /// The identity (no-imbalance) setting.
    pub fn balanced() -> Self {
        Self {
            psi: 1.0,
            theta: 0.0,
        }
    }

    /// Direct and image mixing coefficients `(½(1+ψe^{jθ}), ½(1−ψe^{jθ}))`.
    pub fn coefficients(&self) -> (Complex64, Complex64) {
        let rot = Complex64::new(self.theta.cos(), self.theta.sin()) * self.psi;
        let one = Complex64::new(1.0, 0.0);
        ((one + rot) * 0.5, (one - rot) * 0.5)
    }
}

/// Applies IQ imbalance sample-by-sample.
///
/// # Arguments
/// * `x` - input baseband signal (non-empty).
/// * `imb` - imbalance parameters.
///
/// # Returns
/// A signal of the same length and sample rate where each sample is
/// `½(1+ψe^{jθ})·x[n] + ½(1−ψe^{jθ})·conj(x[n])`.
pub fn apply_iq_imbalance(x: &ComplexSignal, imb: &IqImbalance) -> Result<ComplexSignal> {
    if x.is_empty() {
        return Err(SicError::EmptySignal);
    }
    let (direct, image) = imb.coefficients();
    let samples = x
        .samples
        .iter()
        .map(|&s| direct * s + image * s.conj())
        .collect();
    ComplexSignal::new(samples, x.sample_rate_hz)
}

/// A parallel-Hammerstein nonlinear channel with memory.
///
/// The output is a sum of odd-order monomials over a delay line:
/// `y[n] = Σ_{p odd} Σ_{q=0..p} Σ_{m=0..M-1} h[m,q,p] · x[n-m]^q · conj(x[n-m])^{p-q}`.
///
/// Coefficients are sparse: any `(m, q, p)` key not stored reads as zero.
/// With every key constrained to `q = (p+1)/2` this is the classic
/// memory-polynomial power-amplifier model; with `p = 1` only, it is a plain
/// FIR channel. Composition of those two special cases (and IQ imbalance
/// before them) stays inside the same family, which is what makes the full
/// transmit chain identifiable by a polynomial canceler of matching order and
/// memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhChannel {
    order: usize,
    memory: usize,
    coeffs: BTreeMap<(usize, usize, usize), Complex64>,
}

impl PhChannel {
    /// Creates an all-zero channel of the given nonlinearity order `P`
    /// (odd, ≥ 1) and memory depth `M` (≥ 1 taps).
    pub fn new(order: usize, memory: usize) -> Result<Self> {
        if order == 0 || order % 2 == 0 {
            return Err(SicError::InvalidConfig(format!(
                "nonlinearity order must be odd and positive, got {order}"
            )));
        }
        if memory == 0 {
            return Err(SicError::InvalidConfig("memory depth must be at least 1".into()));
        }
        Ok(Self {
            order,
            memory,
            coeffs: BTreeMap::new(),
        })
    }

    /// Highest monomial order `P`.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Memory depth `M` in taps.
    pub fn memory(&self) -> usize {
        self.memory
    }

    /// Sets the coefficient for the term `x[n-m]^q · conj(x[n-m])^{p-q}`.
    ///
    /// Rejects keys outside the channel's index set: `p` must be odd and at
    /// most the order, `q ≤ p`, and `m` within the memory depth.
    pub fn set_coeff(&mut self, m: usize, q: usize, p: usize, value: Complex64) -> Result<()> {
        if p % 2 == 0 || p == 0 || p > self.order {
            return Err(SicError::InvalidConfig(format!(
                "term order must be odd and within 1..={}, got {p}",
                self.order
            )));
        }
        if q > p {
            return Err(SicError::InvalidConfig(format!(
                "direct power {q} exceeds term order {p}"
            )));
        }
        if m >= self.memory {
            return Err(SicError::InvalidConfig(format!(
                "tap index {m} outside memory depth {}",
                self.memory
            )));
        }
        if !value.re.is_finite() || !value.im.is_finite() {
            return Err(SicError::InvalidConfig("coefficient must be finite".into()));
        }
        self.coeffs.insert((m, q, p), value);
        Ok(())
    }

    /// Builder-style variant of [`set_coeff`](Self::set_coeff).
    pub fn with_coeff(mut self, m: usize, q: usize, p: usize, value: Complex64) -> Result<Self> {
        self.set_coeff(m, q, p, value)?;
        Ok(self)
    }

    /// Coefficient lookup; missing keys are zero.
    pub fn coeff(&self, m: usize, q: usize, p: usize) -> Complex64 {
        self.coeffs
            .get(&(m, q, p))
            .copied()
            .unwrap_or_else(|| Complex64::new(0.0, 0.0))
    }

    /// Iterates the stored `((m, q, p), h)` terms in deterministic key order.
    pub fn terms(&self) -> impl Iterator<Item = (&(usize, usize, usize), &Complex64)> {
        self.coeffs.iter()
    }

    /// Total power gain `Σ|h|²` of the stored coefficients (a proxy for the
    /// channel's small-signal gain when the terms are linear).
    pub fn coeff_power(&self) -> f64 {
        self.coeffs.values().map(|h| h.norm_sqr()).sum()
    }

    /// Scales every stored coefficient by a real factor.
    pub fn scale(&mut self, factor: f64) {
        for h in self.coeffs.values_mut() {
            *h *= factor;
        }
    }
}

/// Runs a signal through a [`PhChannel`].
///
/// History before the first sample is taken as zero, so the output has the
/// same length as the input.
///
/// # Arguments
/// * `x` - input signal, at least as long as the channel memory.
/// * `ch` - channel model.
pub fn apply_ph_model(x: &ComplexSignal, ch: &PhChannel) -> Result<ComplexSignal> {
    if x.is_empty() {
        return Err(SicError::EmptySignal);
    }
    if x.len() < ch.memory {
        return Err(SicError::SignalTooShort {
            needed: ch.memory,
            got: x.len(),
        });
    }
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for (&(m, q, p), &h) in ch.coeffs.iter() {
        let conj_pow = (p - q) as u32;
        let q = q as u32;
        for (n, o) in out.iter_mut().enumerate() {
            if n >= m {
                let s = x.samples[n - m];
                *o += h * monomial(s, q, conj_pow);
            }
        }
    }
    ComplexSignal::new(out, x.sample_rate_hz)
}

/// A Hammerstein channel: one static odd-order polynomial nonlinearity in
/// series with one linear FIR filter.
///
/// `y[n] = Σ_m h[m] · N(x[n-m])` with `N(v) = Σ_{p odd} a[p] · v · |v|^{p-1}`.
///
/// This is the special case of [`PhChannel`] in which every tap shares the
/// same nonlinearity; [`to_ph_channel`](Self::to_ph_channel) performs that
/// embedding exactly (`h[m,p] = h[m]·a[p]` placed at `q = (p+1)/2`).
#[derive(Debug, Clone, PartialEq)]
pub struct HammersteinModel {
    /// FIR taps `h[m]`; non-empty.
    pub filter_taps: Vec<Complex64>,
    /// Odd-order gains `a[p]`, keyed by `p`.
    pub nl_coeffs: BTreeMap<usize, Complex64>,
}

impl HammersteinModel {
    /// Validates taps (non-empty, finite) and nonlinearity keys (odd).
    pub fn new(
        filter_taps: Vec<Complex64>,
        nl_coeffs: BTreeMap<usize, Complex64>,
    ) -> Result<Self> {
        if filter_taps.is_empty() {
            return Err(SicError::InvalidConfig("filter taps must be non-empty".into()));
        }
        if filter_taps
            .iter()
            .any(|h| !h.re.is_finite() || !h.im.is_finite())
        {
            return Err(SicError::InvalidConfig("filter taps must be finite".into()));
        }
        if let Some((&p, _)) = nl_coeffs.iter().find(|(&p, _)| p % 2 == 0 || p == 0) {
            return Err(SicError::InvalidConfig(format!(
                "nonlinearity orders must be odd and positive, got {p}"
            )));
        }
        Ok(Self {
            filter_taps,
            nl_coeffs,
        })
    }

    /// The static nonlinearity `N(v) = Σ a[p] · v · |v|^{p-1}` at one sample.
    /// `p` is odd, so `|v|^{p-1}` is computed as `(v·conj v)^{(p-1)/2}`
    /// without a square root.
    pub fn nonlinearity(&self, v: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (&p, &a) in &self.nl_coeffs {
            let mag_pow = v.norm_sqr().powi(((p - 1) / 2) as i32);
            acc += a * v * mag_pow;
        }
        acc
    }

    /// Embeds the model into the parallel-Hammerstein family it is a special
    /// case of. The conversion is exact: running a signal through the result
    /// agrees with [`apply_hammerstein`] to floating-point rounding.
    pub fn to_ph_channel(&self) -> Result<PhChannel> {
        let order = self.nl_coeffs.keys().copied().max().unwrap_or(1);
        let mut ch = PhChannel::new(order, self.filter_taps.len())?;
        for (m, &h) in self.filter_taps.iter().enumerate() {
            for (&p, &a) in &self.nl_coeffs {
                ch.set_coeff(m, (p + 1) / 2, p, h * a)?;
            }
        }
        Ok(ch)
    }
}

/// Runs a signal through a [`HammersteinModel`] (zero-padded history).
pub fn apply_hammerstein(x: &ComplexSignal, hm: &HammersteinModel) -> Result<ComplexSignal> {
    if x.is_empty() {
        return Err(SicError::EmptySignal);
    }
    if x.len() < hm.filter_taps.len() {
        return Err(SicError::SignalTooShort {
            needed: hm.filter_taps.len(),
            got: x.len(),
        });
    }
    // Apply the static nonlinearity once per sample, then filter.
    let shaped: Vec<Complex64> = x.samples.iter().map(|&v| hm.nonlinearity(v)).collect();
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for (m, &h) in hm.filter_taps.iter().enumerate() {
        for (n, o) in out.iter_mut().enumerate() {
            if n >= m {
                *o += h * shaped[n - m];
            }
        }
    }
    ComplexSignal::new(out, x.sample_rate_hz)
}

/// Everything needed to synthesize a reproducible `tx`/`rx` capture.
///
/// The receive signal is built as `rx = si_channel(pa(iq(tx)))`, optionally
/// plus circular complex Gaussian noise. All randomness (transmit symbols and
/// noise) is drawn from one ChaCha20 stream seeded by `seed`, so a config
/// regenerates bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Capture length in samples.
    pub n_samples: usize,
    /// PRNG seed for symbols and noise.
    pub seed: u64,
    /// Transmitter IQ imbalance.
    pub iq: IqImbalance,
    /// Power-amplifier model (memory-polynomial form).
    pub pa: PhChannel,
    /// Leakage channel between PA output and receiver.
    pub si_channel: PhChannel,
    /// Receiver noise power relative to the SI power, in dB (e.g. `-48.0`);
    /// `None` disables noise, which is the default.
    pub noise_floor_dbc: Option<f64>,
    /// Train/test split ratio in (0, 1); consumed by the tools, not by
    /// [`generate_dataset`] itself.
    pub split_ratio: f64,
}

impl DatasetConfig {
    /// The default synthetic chain: mild IQ imbalance (image ≈ −39 dBc), a
    /// three-tap PA whose third/fifth-order products land ≈ 45–52 dB below
    /// the linear component, and an 11-tap multipath leakage channel scaled
    /// to −53 dB overall. The composite nonlinearity spans exactly 13 taps
    /// and order 5, so a polynomial canceler with `P = 5`, `M = 13` can
    /// represent it.
    pub fn default_with_seed(seed: u64) -> Self {
        let iq = IqImbalance {
            psi: 0.98,
            theta: 0.01,
        };

        let pa = PhChannel::new(5, 3)
            .and_then(|c| c.with_coeff(0, 1, 1, Complex64::new(1.0, 0.0)))
            .and_then(|c| c.with_coeff(1, 1, 1, Complex64::from_polar(0.08, 0.3)))
            .and_then(|c| c.with_coeff(2, 1, 1, Complex64::from_polar(0.02, -0.55)))
            .and_then(|c| c.with_coeff(0, 2, 3, Complex64::from_polar(2.0e-3, 1.1)))
            .and_then(|c| c.with_coeff(1, 2, 3, Complex64::from_polar(2.5e-4, -0.4)))
            .and_then(|c| c.with_coeff(0, 3, 5, Complex64::from_polar(2.3e-4, 2.0)))
            .expect("static PA coefficients are within bounds");

        let si_channel = Self::multipath_channel(11, -53.0);

        Self {
            n_samples: 20_480,
            seed,
            iq,
            pa,
            si_channel,
            noise_floor_dbc: None,
            split_ratio: 0.9,
        }
    }

    /// A fully linear chain (balanced modulator, unit-gain PA, 13-tap linear
    /// leakage channel at −53 dB). Useful as a canceler sanity check: a
    /// linear least-squares canceler of memory ≥ 13 drives the residual to
    /// machine precision on noiseless captures from this config.
    pub fn linear_with_seed(seed: u64) -> Self {
        let pa = PhChannel::new(1, 1)
            .and_then(|c| c.with_coeff(0, 1, 1, Complex64::new(1.0, 0.0)))
            .expect("unit tap is within bounds");
        Self {
            n_samples: 20_480,
            seed,
            iq: IqImbalance::balanced(),
            pa,
            si_channel: Self::multipath_channel(13, -53.0),
            noise_floor_dbc: None,
            split_ratio: 0.9,
        }
    }

    /// Deterministic multipath profile: geometrically decaying tap
    /// magnitudes with a fixed phase progression, normalized so the total
    /// power gain `Σ|h[m]|²` equals `total_gain_db`.
    fn multipath_channel(taps: usize, total_gain_db: f64) -> PhChannel {
        let mut ch = PhChannel::new(1, taps).expect("linear channel settings are valid");
        for m in 0..taps {
            let mag = 0.55_f64.powi(m as i32);
            let phase = 1.9 * m as f64;
            ch.set_coeff(m, 1, 1, Complex64::from_polar(mag, phase))
                .expect("tap index within bounds");
        }
        let scale = (10.0_f64.powf(total_gain_db / 10.0) / ch.coeff_power()).sqrt();
        ch.scale(scale);
        ch
    }

    /// The widest memory any of the chain's models uses.
    pub fn max_memory(&self) -> usize {
        self.pa.memory().max(self.si_channel.memory())
    }
}

/// Synthesizes a `(tx, rx)` capture from a config.
///
/// `tx` is a QPSK multicarrier waveform (1024 active carriers on a 2048-point
/// transform, cyclic prefix 128, unit mean power) drawn deterministically
/// from the seed. `rx` is `tx` passed through IQ imbalance, the PA model and
/// the leakage channel, plus optional noise at `noise_floor_dbc` relative to
/// the clean SI power.
///
/// # Errors
/// `n_samples` smaller than the widest model memory is rejected.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(ComplexSignal, ComplexSignal)> {
    if cfg.n_samples < cfg.max_memory().max(1) {
        return Err(SicError::InvalidConfig(format!(
            "n_samples too small: {} samples cannot cover model memory {}",
            cfg.n_samples,
            cfg.max_memory()
        )));
    }
    if !(0.0..1.0).contains(&cfg.split_ratio) || cfg.split_ratio <= 0.0 {
        return Err(SicError::InvalidConfig(format!(
            "split ratio must be in (0, 1), got {}",
            cfg.split_ratio
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let tx = ofdm_qpsk_waveform(cfg.n_samples, &mut rng)?;

    let after_iq = apply_iq_imbalance(&tx, &cfg.iq)?;
    let after_pa = apply_ph_model(&after_iq, &cfg.pa)?;
    let mut rx = apply_ph_model(&after_pa, &cfg.si_channel)?;

    if let Some(dbc) = cfg.noise_floor_dbc {
        let si_power = rx.mean_power();
        let sigma = (si_power * 10.0_f64.powf(dbc / 10.0)).sqrt();
        for s in rx.samples.iter_mut() {
            *s += complex_gaussian(&mut rng) * sigma;
        }
    }

    Ok((tx, rx))
}

/// One draw of circular complex Gaussian noise with unit mean power,
/// via the polar (Box–Muller) transform.
fn complex_gaussian(rng: &mut ChaCha20Rng) -> Complex64 {
    // Draw u1 from (0, 1]: flipping the half-open range keeps ln() finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    let radius = (-u1.ln()).sqrt();
    Complex64::from_polar(radius, 2.0 * PI * u2)
}

/// Generates the QPSK multicarrier transmit waveform, unit-power normalized.
fn ofdm_qpsk_waveform(n_samples: usize, rng: &mut ChaCha20Rng) -> Result<ComplexSignal> {
    let frame_len = OFDM_FFT_SIZE + OFDM_CP_LEN;
    let mut samples = Vec::with_capacity(n_samples + frame_len);

    while samples.len() < n_samples {
        let mut spectrum = vec![Complex64::new(0.0, 0.0); OFDM_FFT_SIZE];
        for k in 1..=OFDM_HALF_ACTIVE {
            spectrum[k] = qpsk_symbol(rng);
            spectrum[OFDM_FFT_SIZE - k] = qpsk_symbol(rng);
        }
        ifft_pow2(&mut spectrum);
        // Cyclic prefix: the tail of the time-domain symbol leads it.
        samples.extend_from_slice(&spectrum[OFDM_FFT_SIZE - OFDM_CP_LEN..]);
        samples.extend_from_slice(&spectrum);
    }
    samples.truncate(n_samples);

    let power = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / n_samples as f64;
    let scale = 1.0 / power.sqrt();
    for s in samples.iter_mut() {
        *s *= scale;
    }
    ComplexSignal::new(samples, DEFAULT_SAMPLE_RATE_HZ)
}

/// One Gray-mapped QPSK constellation point with unit energy.
fn qpsk_symbol(rng: &mut ChaCha20Rng) -> Complex64 {
    let bits: u8 = rng.random_range(0..4);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let re = if bits & 1 == 0 { scale } else { -scale };
    let im = if bits & 2 == 0 { scale } else { -scale };
    Complex64::new(re, im)
}

/// In-place inverse FFT, radix-2, power-of-two lengths only, with the 1/N
/// scaling included.
///
/// Deliberately scalar: the dataset generator promises bit-identical output
/// for a given seed, and a library that switches kernels based on runtime CPU
/// detection could change last-ulp rounding from machine to machine.
fn ifft_pow2(buf: &mut [Complex64]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two(), "transform length must be a power of two");

    // Bit-reversal reordering.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }

    // Butterfly passes with +j convention (inverse transform).
    let mut len = 2;
    while len <= n {
        let angle = 2.0 * PI / len as f64;
        let w_len = Complex64::new(angle.cos(), angle.sin());
        let mut start = 0;
        while start < n {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let even = buf[start + k];
                let odd = buf[start + k + len / 2] * w;
                buf[start + k] = even + odd;
                buf[start + k + len / 2] = even - odd;
                w *= w_len;
            }
            start += len;
        }
        len <<= 1;
    }

    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Sidecar metadata stored next to each dataset's CSV pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Sampling rate of both signals in Hz.
    pub sample_rate_hz: f64,
    /// Number of rows in each CSV file.
    pub n_samples: usize,
    /// Free-form provenance note.
    pub description: String,
}

/// Writes `<prefix>.tx.csv`, `<prefix>.rx.csv` and `<prefix>.meta.json`.
///
/// Each CSV line is `I,Q` printed with Rust's shortest round-trip float
/// formatting, so loading the files back reproduces the samples bit-exactly.
pub fn save_dataset(
    prefix: &Path,
    tx: &ComplexSignal,
    rx: &ComplexSignal,
    description: &str,
) -> Result<()> {
    if tx.len() != rx.len() {
        return Err(SicError::LengthMismatch {
            context: "tx and rx".into(),
            left: tx.len(),
            right: rx.len(),
        });
    }
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_iq_csv(&with_suffix(prefix, ".tx.csv"), &tx.samples)?;
    write_iq_csv(&with_suffix(prefix, ".rx.csv"), &rx.samples)?;

    let meta = DatasetMeta {
        sample_rate_hz: tx.sample_rate_hz,
        n_samples: tx.len(),
        description: description.to_string(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| SicError::Parse(format!("metadata serialization failed: {e}")))?;
    fs::write(with_suffix(prefix, ".meta.json"), json + "\n")?;
    Ok(())
}

/// Loads a dataset saved by [`save_dataset`].
///
/// `prefix` may be the bare prefix or any of the three file paths (the
/// suffix is stripped). Both CSVs must exist, parse, and agree with the
/// metadata on length.
pub fn load_dataset(prefix: &Path) -> Result<(ComplexSignal, ComplexSignal)> {
    let prefix = strip_dataset_suffix(prefix);

    let meta_path = with_suffix(&prefix, ".meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| {
        SicError::Parse(format!("missing metadata {}: {e}", meta_path.display()))
    })?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| SicError::Parse(format!("bad metadata {}: {e}", meta_path.display())))?;

    let tx = read_iq_csv(&with_suffix(&prefix, ".tx.csv"))?;
    let rx = read_iq_csv(&with_suffix(&prefix, ".rx.csv"))?;
    if tx.len() != rx.len() {
        return Err(SicError::LengthMismatch {
            context: "tx and rx files".into(),
            left: tx.len(),
            right: rx.len(),
        });
    }
    if tx.len() != meta.n_samples {
        return Err(SicError::LengthMismatch {
            context: "samples vs metadata".into(),
            left: tx.len(),
            right: meta.n_samples,
        });
    }
    Ok((
        ComplexSignal::new(tx, meta.sample_rate_hz)?,
        ComplexSignal::new(rx, meta.sample_rate_hz)?,
    ))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn strip_dataset_suffix(path: &Path) -> PathBuf {
    let text = path.to_string_lossy();
    for suffix in [".meta.json", ".tx.csv", ".rx.csv"] {
        if let Some(stripped) = text.strip_suffix(suffix) {
            return PathBuf::from(stripped);
        }
    }
    path.to_path_buf()
}

fn write_iq_csv(path: &Path, samples: &[Complex64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        writeln!(out, "{},{}", s.re, s.im)?;
    }
    out.flush()?;
    Ok(())
}

fn read_iq_csv(path: &Path) -> Result<Vec<Complex64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| SicError::Parse(format!("cannot read {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (i_str, q_str) = line.split_once(',').ok_or_else(|| {
            SicError::Parse(format!(
                "{}:{}: expected `I,Q`, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| {
                SicError::Parse(format!(
                    "{}:{}: bad float {s:?}: {e}",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        samples.push(Complex64::new(parse(i_str)?, parse(q_str)?));
    }
    if samples.is_empty() {
        return Err(SicError::Parse(format!("{}: no samples", path.display())));
    }
    Ok(samples)
}

/// Splits a `tx`/`rx` pair into contiguous train and test sections: the first
/// `⌊ratio·N⌋` samples train, the remainder tests. No shuffling — the test
/// section is a genuinely unseen stretch of signal.
pub fn split_dataset(
    tx: &ComplexSignal,
    rx: &ComplexSignal,
    ratio: f64,
) -> Result<(ComplexSignal, ComplexSignal, ComplexSignal, ComplexSignal)> {
    if tx.len() != rx.len() {
        return Err(SicError::LengthMismatch {
            context: "tx and rx".into(),
            left: tx.len(),
            right: rx.len(),
        });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(SicError::InvalidConfig(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let n = tx.len();
    let n_train = (ratio * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(SicError::InvalidConfig(format!(
            "degenerate split: {n_train} train / {} test samples",
            n - n_train
        )));
    }
    let fs = tx.sample_rate_hz;
    Ok((
        ComplexSignal::new(tx.samples[..n_train].to_vec(), fs)?,
        ComplexSignal::new(rx.samples[..n_train].to_vec(), fs)?,
        ComplexSignal::new(tx.samples[n_train..].to_vec(), fs)?,
        ComplexSignal::new(rx.samples[n_train..].to_vec(), fs)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(values: &[(f64, f64)]) -> ComplexSignal {
        ComplexSignal::new(
            values.iter().map(|&(re, im)| Complex64::new(re, im)).collect(),
            DEFAULT_SAMPLE_RATE_HZ,
        )
        .unwrap()
    }

    fn rand_complex(rng: &mut ChaCha20Rng) -> Complex64 {
        Complex64::new(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn balanced_modulator_is_identity() {
        let x = signal(&[(1.0, 2.0), (-0.5, 0.25), (0.0, -3.0)]);
        let y = apply_iq_imbalance(&x, &IqImbalance::balanced()).unwrap();
        // The image coefficient is exactly zero, so samples pass unchanged.
        assert_eq!(x.samples, y.samples);
    }

    #[test]
    fn real_input_with_zero_phase_error_is_preserved() {
        let x = signal(&[(1.0, 0.0)]);
        let imb = IqImbalance::new(0.7, 0.0).unwrap();
        let y = apply_iq_imbalance(&x, &imb).unwrap();
        // ½(1+ψ) + ½(1−ψ) = 1 up to rounding.
        assert!((y.samples[0].re - 1.0).abs() < 1e-14);
        assert!(y.samples[0].im.abs() < 1e-14);
    }

    #[test]
    fn imbalance_matches_term_by_term_evaluation() {
        // Independent scalar evaluation with explicit real arithmetic.
        let (psi, theta): (f64, f64) = (0.9, 0.1);
        let x = Complex64::new(0.0, 1.0);
        let (c, s) = (theta.cos(), theta.sin());
        // direct = ½(1+ψcosθ) + j·½ψsinθ ; image = ½(1−ψcosθ) − j·½ψsinθ
        let direct = Complex64::new(0.5 * (1.0 + psi * c), 0.5 * psi * s);
        let image = Complex64::new(0.5 * (1.0 - psi * c), -0.5 * psi * s);
        let expected = direct * x + image * x.conj();

        let sig = signal(&[(0.0, 1.0)]);
        let got = apply_iq_imbalance(&sig, &IqImbalance::new(psi, theta).unwrap()).unwrap();
        assert!((got.samples[0] - expected).norm() < 1e-15);
    }

    #[test]
    fn empty_signal_is_rejected() {
        assert!(matches!(
            ComplexSignal::new(vec![], DEFAULT_SAMPLE_RATE_HZ),
            Err(SicError::EmptySignal)
        ));
    }

    #[test]
    fn unit_linear_tap_is_identity() {
        let ch = PhChannel::new(1, 1)
            .unwrap()
            .with_coeff(0, 1, 1, Complex64::new(1.0, 0.0))
            .unwrap();
        let x = signal(&[(0.3, -0.7), (1.5, 0.2), (-0.1, 0.9)]);
        let y = apply_ph_model(&x, &ch).unwrap();
        assert_eq!(x.samples, y.samples);
    }

    #[test]
    fn single_cubic_term_gives_magnitude_scaled_sample() {
        let ch = PhChannel::new(3, 1)
            .unwrap()
            .with_coeff(0, 2, 3, Complex64::new(1.0, 0.0))
            .unwrap();
        let a = Complex64::new(0.6, -0.8); // |a|² = 1
        let x = ComplexSignal::new(vec![a], DEFAULT_SAMPLE_RATE_HZ).unwrap();
        let y = apply_ph_model(&x, &ch).unwrap();
        let expected = a * a * a.conj(); // a·|a|²
        assert!((y.samples[0] - expected).norm() < 1e-15);
    }

    #[test]
    fn ph_model_matches_brute_force_triple_sum() {
        // Dense random channel, P=3, M=2, against an index-loop oracle that
        // never touches the coefficient map iteration order.
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut ch = PhChannel::new(3, 2).unwrap();
        for p in [1usize, 3] {
            for q in 0..=p {
                for m in 0..2 {
                    ch.set_coeff(m, q, p, rand_complex(&mut rng) * 0.5).unwrap();
                }
            }
        }
        let x = ComplexSignal::new(
            (0..64).map(|_| rand_complex(&mut rng)).collect(),
            DEFAULT_SAMPLE_RATE_HZ,
        )
        .unwrap();

        let got = apply_ph_model(&x, &ch).unwrap();
        for n in 0..x.len() {
            let mut expected = Complex64::new(0.0, 0.0);
            for p in [1usize, 3] {
                for q in 0..=p {
                    for m in 0..2 {
                        let s = x.delayed(n, m);
                        let mut term = ch.coeff(m, q, p);
                        for _ in 0..q {
                            term *= s;
                        }
                        for _ in 0..(p - q) {
                            term *= s.conj();
                        }
                        expected += term;
                    }
                }
            }
            assert!(
                (got.samples[n] - expected).norm() <= 1e-12 * expected.norm().max(1.0),
                "sample {n} diverged from oracle"
            );
        }
    }

    #[test]
    fn hammerstein_identity_and_cube() {
        let identity = HammersteinModel::new(
            vec![Complex64::new(1.0, 0.0)],
            BTreeMap::from([(1, Complex64::new(1.0, 0.0))]),
        )
        .unwrap();
        let x = signal(&[(0.4, 0.1), (-0.2, 0.7)]);
        assert_eq!(apply_hammerstein(&x, &identity).unwrap().samples, x.samples);

        let cubic = HammersteinModel::new(
            vec![Complex64::new(1.0, 0.0)],
            BTreeMap::from([(3, Complex64::new(1.0, 0.0))]),
        )
        .unwrap();
        let two = signal(&[(2.0, 0.0)]);
        let y = apply_hammerstein(&two, &cubic).unwrap();
        assert!((y.samples[0] - Complex64::new(8.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn hammerstein_equals_its_ph_embedding() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..20 {
            let taps: Vec<Complex64> = (0..3).map(|_| rand_complex(&mut rng)).collect();
            let nl = BTreeMap::from([
                (1, rand_complex(&mut rng)),
                (3, rand_complex(&mut rng) * 0.3),
                (5, rand_complex(&mut rng) * 0.1),
            ]);
            let hm = HammersteinModel::new(taps, nl).unwrap();
            let ch = hm.to_ph_channel().unwrap();
            let x = ComplexSignal::new(
                (0..32).map(|_| rand_complex(&mut rng)).collect(),
                DEFAULT_SAMPLE_RATE_HZ,
            )
            .unwrap();
            let direct = apply_hammerstein(&x, &hm).unwrap();
            let embedded = apply_ph_model(&x, &ch).unwrap();
            for (a, b) in direct.samples.iter().zip(&embedded.samples) {
                assert!((a - b).norm() <= 1e-12 * a.norm().max(1e-30));
            }
        }
    }

    #[test]
    fn magnitude_power_forms_agree() {
        // v·|v|^{p-1} and v^{(p+1)/2}·conj(v)^{(p-1)/2} are the same monomial
        // written two ways; both evaluation routes must agree tightly.
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        for _ in 0..100 {
            let v = rand_complex(&mut rng) * 2.0;
            for p in [1u32, 3, 5, 7] {
                let via_mag = v * v.norm_sqr().powi(((p - 1) / 2) as i32);
                let via_powers = monomial(v, (p + 1) / 2, (p - 1) / 2);
                assert!(
                    (via_mag - via_powers).norm() <= 1e-12 * via_mag.norm().max(1e-30),
                    "p={p}, v={v}"
                );
            }
        }
    }

    #[test]
    fn transparent_chain_returns_tx_unchanged() {
        let mut cfg = DatasetConfig::linear_with_seed(5);
        cfg.n_samples = 1024;
        cfg.si_channel = PhChannel::new(1, 1)
            .unwrap()
            .with_coeff(0, 1, 1, Complex64::new(1.0, 0.0))
            .unwrap();
        let (tx, rx) = generate_dataset(&cfg).unwrap();
        assert_eq!(tx.samples, rx.samples);
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let mut cfg = DatasetConfig::default_with_seed(42);
        cfg.n_samples = 4096;
        cfg.noise_floor_dbc = Some(-50.0);
        let (tx1, rx1) = generate_dataset(&cfg).unwrap();
        let (tx2, rx2) = generate_dataset(&cfg).unwrap();
        assert_eq!(tx1.samples, tx2.samples);
        assert_eq!(rx1.samples, rx2.samples);
    }

    #[test]
    fn generated_waveform_is_unit_power() {
        let mut cfg = DatasetConfig::default_with_seed(3);
        cfg.n_samples = 8192;
        let (tx, _) = generate_dataset(&cfg).unwrap();
        assert!((tx.mean_power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn undersized_capture_is_rejected() {
        let mut cfg = DatasetConfig::default_with_seed(1);
        cfg.n_samples = 4;
        match generate_dataset(&cfg) {
            Err(SicError::InvalidConfig(msg)) => assert!(msg.contains("too small")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn split_follows_floor_convention() {
        let x = ComplexSignal::new(
            vec![Complex64::new(1.0, 0.0); 20_480],
            DEFAULT_SAMPLE_RATE_HZ,
        )
        .unwrap();
        let (a, _, b, _) = split_dataset(&x, &x, 0.9).unwrap();
        assert_eq!((a.len(), b.len()), (18_432, 2_048));

        let ten = ComplexSignal::new(vec![Complex64::new(1.0, 0.0); 10], 1.0).unwrap();
        let (a, _, b, _) = split_dataset(&ten, &ten, 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a, _, b, _) = split_dataset(&ten, &ten, 0.99).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
    }

    #[test]
    fn degenerate_split_is_rejected() {
        let two = ComplexSignal::new(vec![Complex64::new(1.0, 0.0); 2], 1.0).unwrap();
        assert!(split_dataset(&two, &two, 0.01).is_err());
        assert!(split_dataset(&two, &two, 1.0).is_err());
    }

    #[test]
    fn dataset_files_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("capture");
        let mut cfg = DatasetConfig::default_with_seed(9);
        cfg.n_samples = 512;
        let (tx, rx) = generate_dataset(&cfg).unwrap();
        save_dataset(&prefix, &tx, &rx, "round-trip test").unwrap();

        let (tx2, rx2) = load_dataset(&prefix).unwrap();
        assert_eq!(tx.samples, tx2.samples);
        assert_eq!(rx.samples, rx2.samples);
        assert_eq!(tx2.sample_rate_hz, DEFAULT_SAMPLE_RATE_HZ);

        // Loading via any of the three file names works too.
        let (tx3, _) = load_dataset(&prefix.with_extension("")).unwrap_or((tx2.clone(), rx2));
        assert_eq!(tx.samples, tx3.samples);
    }

    #[test]
    fn mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("bad");
        let tx = ComplexSignal::new(vec![Complex64::new(1.0, 2.0); 100], 1.0).unwrap();
        save_dataset(&prefix, &tx, &tx, "tamper test").unwrap();

        // Drop one rx row behind the metadata's back.
        let rx_path = dir.path().join("bad.rx.csv");
        let text = fs::read_to_string(&rx_path).unwrap();
        let shortened: Vec<&str> = text.lines().take(99).collect();
        fs::write(&rx_path, shortened.join("\n")).unwrap();

        match load_dataset(&prefix) {
            Err(SicError::LengthMismatch { .. }) => {}
            other => panic!("expected length mismatch, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_and_missing_meta_are_diagnosed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.tx.csv"), "1.0,2.0\n").unwrap();
        fs::write(dir.path().join("x.rx.csv"), "1.0,2.0\n").unwrap();
        match load_dataset(&dir.path().join("x")) {
            Err(SicError::Parse(msg)) => assert!(msg.contains("metadata")),
            other => panic!("expected parse error, got {other:?}"),
        }

        let prefix = dir.path().join("y");
        let sig = ComplexSignal::new(vec![Complex64::new(0.0, 0.0); 2], 1.0).unwrap();
        save_dataset(&prefix, &sig, &sig, "").unwrap();
        fs::write(dir.path().join("y.tx.csv"), "1.0;2.0\n0,0\n").unwrap();
        match load_dataset(&prefix) {
            Err(SicError::Parse(msg)) => assert!(msg.contains("expected `I,Q`")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
