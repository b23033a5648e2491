//! Canceler architectures: configuration, named presets, network assembly,
//! and the two-stage fitting pipeline.
//!
//! Every canceler in this crate sees the same thing per received sample: the
//! current and `M−1` previous transmit samples. The *input graph* arranges
//! those as an `M×2` real matrix (I and Q columns, newest sample in the top
//! row); what differs between architectures is what happens next —
//! a convolution feeding a recurrence (HCRNN/HCRDNN), a flat buffered
//! feed-forward net (RV-TDNN), a plain recurrence over the delay line (RNN),
//! or the closed-form polynomial/linear stages that need no network at all.
//!
//! The module also owns [`fit_pipeline`], the end-to-end two-stage fit:
//! least-squares linear stage first, then the configured nonlinear stage
//! trained on the linear residual. Three of the configurations
//! (`cv_tdnn`, `lwgs`, `mwgs`) exist for complexity accounting only — their
//! published arithmetic is complex-valued and outside this crate's training
//! engine — and refuse to build networks.
//!
//! # Example
//!
//! ```rust
//! use sic_core::architectures::{build_input_graph, build_network, preset};
//! use sic_core::signals::{generate_dataset, DatasetConfig};
//!
//! let hcrnn = preset("hcrnn_opt").unwrap();
//! let net = build_network(&hcrnn.arch, 42).unwrap();
//!
//! let mut cfg = DatasetConfig::default_with_seed(3);
//! cfg.n_samples = 256;
//! let (tx, _) = generate_dataset(&cfg).unwrap();
//! let graph = build_input_graph(&tx, 100, 13).unwrap();
//! let (i, q) = sic_core::architectures::forward_hcrnn(&net, &graph).unwrap();
//! assert!(i.is_finite() && q.is_finite());
//! ```

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::linear_canceler::{
    fit_linear, ls_fit, predict_linear, residual, LinearTaps, RegressorMatrix,
};
use crate::nn_engine::{
    train, Activation, Conv2dLayer, DenseLayer, Layer, Network, RecurrentLayer, Tensor, TrainData,
    TrainOutcome, TrainSettings,
};
use crate::poly_canceler::{build_ph_regressor, fit_poly, predict_poly, PolyBasisSpec, PolyCoeffs};
use crate::signals::ComplexSignal;
use crate::{Result, SicError};

/// Delay-line snapshot fed to the neural cancelers: an `M×2` tensor whose
/// row `m` holds `[I(n−m), Q(n−m)]`, newest sample on top, with zero-padded
/// history before the start of the signal.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGraph {
    /// The `[memory, 2]` tensor.
    pub tensor: Tensor,
}

impl InputGraph {
    /// Memory depth `M` (number of rows).
    pub fn memory(&self) -> usize {
        self.tensor.shape[0]
    }
}

/// Builds the input graph for predicting sample `n`.
pub fn build_input_graph(x: &ComplexSignal, n: usize, memory: usize) -> Result<InputGraph> {
    if memory == 0 {
        return Err(SicError::InvalidConfig("memory depth must be at least 1".into()));
    }
    if n >= x.len() {
        return Err(SicError::InvalidConfig(format!(
            "sample index {n} outside signal of length {}",
            x.len()
        )));
    }
    let mut tensor = Tensor::zeros(&[memory, 2]);
    for m in 0..memory {
        let s = x.delayed(n, m);
        tensor.data[2 * m] = s.re;
        tensor.data[2 * m + 1] = s.im;
    }
    Ok(InputGraph { tensor })
}

/// Full description of one canceler architecture.
///
/// `memory` is the delay-line depth `M` everywhere. The conv/recurrent kinds
/// use the published structural parameters: `maps` feature maps (`L`),
/// kernels of `kernel_rows × kernel_cols × kernel_depth` (`R×S×Z`; executable
/// networks require depth 1, the depth only matters to the complexity
/// formulas), `rec_units` recurrent neurons, and for the dense variant
/// `dense_units` hidden neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchitectureConfig {
    /// Least-squares FIR stage only.
    Linear {
        /// Delay-line depth `M`.
        memory: usize,
    },
    /// Two-stage: linear plus the odd-order memory-polynomial basis.
    Polynomial {
        /// Highest monomial order `P` (odd).
        order: usize,
        /// Delay-line depth `M`.
        memory: usize,
    },
    /// Hybrid convolutional-recurrent network on the input graph.
    Hcrnn {
        memory: usize,
        maps: usize,
        kernel_rows: usize,
        kernel_cols: usize,
        kernel_depth: usize,
        rec_units: usize,
        conv_activation: Activation,
        rec_activation: Activation,
    },
    /// HCRNN with an extra dense hidden layer before the output.
    Hcrdnn {
        memory: usize,
        maps: usize,
        kernel_rows: usize,
        kernel_cols: usize,
        kernel_depth: usize,
        rec_units: usize,
        dense_units: usize,
        conv_activation: Activation,
        rec_activation: Activation,
        dense_activation: Activation,
    },
    /// Real-valued time-delay (buffered feed-forward) network: the flattened
    /// input graph through dense layers.
    RvTdnn {
        memory: usize,
        hidden: Vec<usize>,
        activation: Activation,
    },
    /// Plain recurrent baseline: the delay line consumed as a `T = M` step
    /// sequence of I/Q pairs.
    Rnn {
        memory: usize,
        hidden: Vec<usize>,
        activation: Activation,
    },
    /// Complex-valued time-delay network. Complexity accounting only.
    CvTdnn {
        memory: usize,
        hidden: Vec<usize>,
    },
    /// Ladder-wise grid structure. Complexity accounting only.
    Lwgs {
        n_input: usize,
        n_hidden: usize,
    },
    /// Moving-window grid structure. Complexity accounting only.
    Mwgs {
        n_input: usize,
        n_hidden: usize,
        window: usize,
    },
}

impl ArchitectureConfig {
    /// The delay-line depth the architecture consumes.
    pub fn memory(&self) -> usize {
        match self {
            Self::Linear { memory }
            | Self::Polynomial { memory, .. }
            | Self::Hcrnn { memory, .. }
            | Self::Hcrdnn { memory, .. }
            | Self::RvTdnn { memory, .. }
            | Self::Rnn { memory, .. }
            | Self::CvTdnn { memory, .. } => *memory,
            Self::Lwgs { n_input, .. } | Self::Mwgs { n_input, .. } => *n_input,
        }
    }

    /// Whether [`build_network`] can realize the architecture. The
    /// complex-valued kinds are carried for their complexity formulas only.
    pub fn is_trainable_network(&self) -> bool {
        matches!(
            self,
            Self::Hcrnn { .. } | Self::Hcrdnn { .. } | Self::RvTdnn { .. } | Self::Rnn { .. }
        )
    }

    /// Checks structural invariants (odd polynomial order, kernel fits the
    /// graph, non-empty layer lists, and so on).
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SicError::InvalidConfig(msg));
        match self {
            Self::Linear { memory } => {
                if *memory == 0 {
                    return fail("memory depth must be at least 1".into());
                }
            }
            Self::Polynomial { order, memory } => {
                PolyBasisSpec {
                    order: *order,
                    memory: *memory,
                    ..PolyBasisSpec::default()
                }
                .validate()?;
            }
            Self::Hcrnn {
                memory,
                maps,
                kernel_rows,
                kernel_cols,
                kernel_depth,
                rec_units,
                ..
            }
            | Self::Hcrdnn {
                memory,
                maps,
                kernel_rows,
                kernel_cols,
                kernel_depth,
                rec_units,
                ..
            } => {
                if *memory == 0 || *maps == 0 || *rec_units == 0 {
                    return fail("memory, maps and recurrent units must be at least 1".into());
                }
                if *kernel_rows == 0 || *kernel_rows > *memory {
                    return fail(format!(
                        "kernel rows {kernel_rows} must be in 1..={memory}"
                    ));
                }
                if *kernel_cols == 0 || *kernel_cols > 2 {
                    return fail(format!(
                        "kernel cols {kernel_cols} must be 1 or 2 (the graph has two columns)"
                    ));
                }
                if *kernel_depth == 0 {
                    return fail("kernel depth must be at least 1".into());
                }
                if let Self::Hcrdnn { dense_units, .. } = self {
                    if *dense_units == 0 {
                        return fail("dense units must be at least 1".into());
                    }
                }
            }
            Self::RvTdnn { memory, hidden, .. }
            | Self::Rnn { memory, hidden, .. }
            | Self::CvTdnn { memory, hidden } => {
                if *memory == 0 {
                    return fail("memory depth must be at least 1".into());
                }
                if hidden.is_empty() || hidden.iter().any(|&h| h == 0) {
                    return fail("hidden layer list must be non-empty and positive".into());
                }
            }
            Self::Lwgs { n_input, n_hidden } => {
                if *n_input == 0 || *n_hidden == 0 {
                    return fail("input and hidden sizes must be at least 1".into());
                }
            }
            Self::Mwgs {
                n_input,
                n_hidden,
                window,
            } => {
                if *n_input == 0 || *n_hidden == 0 || *window == 0 {
                    return fail("input, hidden and window sizes must be at least 1".into());
                }
            }
        }
        Ok(())
    }

    /// Convolution output geometry `(B, C)` for the conv-recurrent kinds:
    /// `B = M−R+1` rows, `C = 2−S+1` columns.
    pub fn conv_output_dims(&self) -> Option<(usize, usize)> {
        match self {
            Self::Hcrnn {
                memory,
                kernel_rows,
                kernel_cols,
                ..
            }
            | Self::Hcrdnn {
                memory,
                kernel_rows,
                kernel_cols,
                ..
            } => Some((memory - kernel_rows + 1, 2 - kernel_cols + 1)),
            _ => None,
        }
    }
}

/// Assembles a trainable [`Network`] from a config, with Glorot-uniform
/// initial weights drawn from the seed.
///
/// # Errors
/// Rejects invalid configs, the complexity-only kinds, kernel depth ≠ 1,
/// and the linear/polynomial kinds (those stages are solved in closed form,
/// not trained).
pub fn build_network(arch: &ArchitectureConfig, seed: u64) -> Result<Network> {
    use rand::SeedableRng;
    arch.validate()?;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    match arch {
        ArchitectureConfig::Hcrnn {
            maps,
            kernel_rows,
            kernel_cols,
            kernel_depth,
            rec_units,
            conv_activation,
            rec_activation,
            ..
        } => {
            if *kernel_depth != 1 {
                return Err(SicError::InvalidConfig(
                    "only kernel depth 1 is trainable (the input graph has one channel)".into(),
                ));
            }
            let (_, c_cols) = arch.conv_output_dims().expect("conv kind");
            Ok(Network::new(vec![
                Layer::Conv2d(Conv2dLayer::glorot(
                    *maps,
                    *kernel_rows,
                    *kernel_cols,
                    *conv_activation,
                    &mut rng,
                )),
                Layer::ReshapeMaps,
                Layer::Recurrent(RecurrentLayer::glorot(
                    c_cols * maps,
                    *rec_units,
                    *rec_activation,
                    false,
                    &mut rng,
                )),
                Layer::Dense(DenseLayer::glorot(
                    *rec_units,
                    2,
                    Activation::Linear,
                    &mut rng,
                )),
            ]))
        }
        ArchitectureConfig::Hcrdnn {
            maps,
            kernel_rows,
            kernel_cols,
            kernel_depth,
            rec_units,
            dense_units,
            conv_activation,
            rec_activation,
            dense_activation,
            ..
        } => {
            if *kernel_depth != 1 {
                return Err(SicError::InvalidConfig(
                    "only kernel depth 1 is trainable (the input graph has one channel)".into(),
                ));
            }
            let (_, c_cols) = arch.conv_output_dims().expect("conv kind");
            Ok(Network::new(vec![
                Layer::Conv2d(Conv2dLayer::glorot(
                    *maps,
                    *kernel_rows,
                    *kernel_cols,
                    *conv_activation,
                    &mut rng,
                )),
                Layer::ReshapeMaps,
                Layer::Recurrent(RecurrentLayer::glorot(
                    c_cols * maps,
                    *rec_units,
                    *rec_activation,
                    false,
                    &mut rng,
                )),
                Layer::Dense(DenseLayer::glorot(
                    *rec_units,
                    *dense_units,
                    *dense_activation,
                    &mut rng,
                )),
                Layer::Dense(DenseLayer::glorot(
                    *dense_units,
                    2,
                    Activation::Linear,
                    &mut rng,
                )),
            ]))
        }
        ArchitectureConfig::RvTdnn {
            memory,
            hidden,
            activation,
        } => {
            let mut layers = Vec::with_capacity(hidden.len() + 1);
            let mut width = 2 * memory;
            for &h in hidden {
                layers.push(Layer::Dense(DenseLayer::glorot(width, h, *activation, &mut rng)));
                width = h;
            }
            layers.push(Layer::Dense(DenseLayer::glorot(
                width,
                2,
                Activation::Linear,
                &mut rng,
            )));
            Ok(Network::new(layers))
        }
        ArchitectureConfig::Rnn {
            hidden, activation, ..
        } => {
            let mut layers = Vec::with_capacity(hidden.len() + 1);
            let mut width = 2; // I/Q pair per step
            for (i, &h) in hidden.iter().enumerate() {
                let keep_sequence = i + 1 < hidden.len();
                layers.push(Layer::Recurrent(RecurrentLayer::glorot(
                    width,
                    h,
                    *activation,
                    keep_sequence,
                    &mut rng,
                )));
                width = h;
            }
            layers.push(Layer::Dense(DenseLayer::glorot(
                width,
                2,
                Activation::Linear,
                &mut rng,
            )));
            Ok(Network::new(layers))
        }
        ArchitectureConfig::Linear { .. } | ArchitectureConfig::Polynomial { .. } => {
            Err(SicError::InvalidConfig(
                "linear and polynomial stages are solved by least squares, not trained".into(),
            ))
        }
        ArchitectureConfig::CvTdnn { .. }
        | ArchitectureConfig::Lwgs { .. }
        | ArchitectureConfig::Mwgs { .. } => Err(SicError::InvalidConfig(
            "this architecture is tracked for complexity only and cannot be trained".into(),
        )),
    }
}

/// Adapts an input graph to the tensor a given architecture's network
/// expects: flattened for the buffered feed-forward kind, the `[M, 2]`
/// matrix for everything else.
pub fn network_input(arch: &ArchitectureConfig, graph: &InputGraph) -> Result<Tensor> {
    match arch {
        ArchitectureConfig::RvTdnn { .. } => Tensor::from_vec(
            &[graph.tensor.numel()],
            graph.tensor.data.clone(),
        ),
        ArchitectureConfig::Hcrnn { .. }
        | ArchitectureConfig::Hcrdnn { .. }
        | ArchitectureConfig::Rnn { .. } => Ok(graph.tensor.clone()),
        _ => Err(SicError::InvalidConfig(
            "architecture does not consume input graphs".into(),
        )),
    }
}

fn forward_pair(net: &Network, input: &Tensor) -> Result<(f64, f64)> {
    let out = net.forward(input)?;
    if out.shape != [2] {
        return Err(SicError::ShapeMismatch(format!(
            "canceler networks must emit [2] (I, Q), got {:?}",
            out.shape
        )));
    }
    Ok((out.data[0], out.data[1]))
}

/// Runs a conv-recurrent canceler on one input graph, returning the
/// predicted `(I, Q)` pair.
pub fn forward_hcrnn(net: &Network, graph: &InputGraph) -> Result<(f64, f64)> {
    forward_pair(net, &graph.tensor)
}

/// Runs a conv-recurrent-dense canceler on one input graph.
pub fn forward_hcrdnn(net: &Network, graph: &InputGraph) -> Result<(f64, f64)> {
    forward_pair(net, &graph.tensor)
}

/// Runs the buffered feed-forward canceler: the graph is flattened row-major
/// to `[I(n), Q(n), I(n−1), Q(n−1), …]` first.
pub fn forward_rv_tdnn(net: &Network, graph: &InputGraph) -> Result<(f64, f64)> {
    let flat = Tensor::from_vec(&[graph.tensor.numel()], graph.tensor.data.clone())?;
    forward_pair(net, &flat)
}

/// Runs the recurrent baseline: the graph's rows are the `T = M` sequence
/// steps, newest first.
pub fn forward_rnn_baseline(net: &Network, graph: &InputGraph) -> Result<(f64, f64)> {
    forward_pair(net, &graph.tensor)
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// A named, ready-to-run configuration: architecture, training
/// hyperparameters (where the architecture is trainable), and the published
/// cancellation figure the configuration is known for (where one exists).
#[derive(Debug, Clone)]
pub struct Preset {
    /// The name [`preset`] resolves.
    pub name: &'static str,
    /// Architecture description.
    pub arch: ArchitectureConfig,
    /// Training hyperparameters; `None` for closed-form and complexity-only
    /// kinds.
    pub training: Option<TrainSettings>,
    /// Reference mean cancellation in dB on the hardware benchmark this
    /// configuration family was tuned on; `None` where not reported.
    pub reference_cancellation_db: Option<f64>,
}

/// Names [`preset`] accepts, in canonical listing order.
pub const PRESET_NAMES: [&str; 13] = [
    "linear",
    "poly_p5",
    "rv_tdnn",
    "rnn",
    "cv_tdnn",
    "lwgs",
    "mwgs",
    "deep_rv_tdnn",
    "deep_rnn",
    "deep_cv_tdnn",
    "hcrnn_opt",
    "hcrdnn1",
    "hcrdnn2",
];

fn training(lr: f64, batch: usize) -> Option<TrainSettings> {
    Some(TrainSettings {
        epochs: 50,
        batch_size: batch,
        learning_rate: lr,
        optimizer: crate::nn_engine::OptimizerKind::Adam,
        shuffle_seed: 0,
    })
}

/// Looks up a named preset. All presets share the delay-line depth `M = 13`.
pub fn preset(name: &str) -> Result<Preset> {
    const M: usize = 13;
    let p = match name {
        "linear" => Preset {
            name: "linear",
            arch: ArchitectureConfig::Linear { memory: M },
            training: None,
            reference_cancellation_db: None,
        },
        "poly_p5" => Preset {
            name: "poly_p5",
            arch: ArchitectureConfig::Polynomial { order: 5, memory: M },
            training: None,
            reference_cancellation_db: Some(44.45),
        },
        "rv_tdnn" => Preset {
            name: "rv_tdnn",
            arch: ArchitectureConfig::RvTdnn {
                memory: M,
                hidden: vec![18],
                activation: Activation::Relu,
            },
            training: training(5e-3, 22),
            reference_cancellation_db: Some(44.76),
        },
        "rnn" => Preset {
            name: "rnn",
            arch: ArchitectureConfig::Rnn {
                memory: M,
                hidden: vec![20],
                activation: Activation::Tanh,
            },
            training: training(2.5e-3, 158),
            reference_cancellation_db: Some(44.94),
        },
        "cv_tdnn" => Preset {
            name: "cv_tdnn",
            arch: ArchitectureConfig::CvTdnn {
                memory: M,
                hidden: vec![7],
            },
            training: None,
            reference_cancellation_db: Some(44.50),
        },
        "lwgs" => Preset {
            name: "lwgs",
            arch: ArchitectureConfig::Lwgs {
                n_input: M,
                n_hidden: 9,
            },
            training: None,
            reference_cancellation_db: Some(44.48),
        },
        "mwgs" => Preset {
            name: "mwgs",
            arch: ArchitectureConfig::Mwgs {
                n_input: M,
                n_hidden: 12,
                window: 5,
            },
            training: None,
            reference_cancellation_db: Some(44.40),
        },
        "deep_rv_tdnn" => Preset {
            name: "deep_rv_tdnn",
            arch: ArchitectureConfig::RvTdnn {
                memory: M,
                hidden: vec![10, 10, 10],
                activation: Activation::Relu,
            },
            training: training(5e-3, 22),
            reference_cancellation_db: Some(44.73),
        },
        "deep_rnn" => Preset {
            name: "deep_rnn",
            arch: ArchitectureConfig::Rnn {
                memory: M,
                hidden: vec![16, 16, 16],
                activation: Activation::Tanh,
            },
            training: training(2.5e-3, 158),
            reference_cancellation_db: Some(45.27),
        },
        "deep_cv_tdnn" => Preset {
            name: "deep_cv_tdnn",
            arch: ArchitectureConfig::CvTdnn {
                memory: M,
                hidden: vec![4, 4, 4],
            },
            training: None,
            reference_cancellation_db: Some(44.63),
        },
        "hcrnn_opt" => Preset {
            name: "hcrnn_opt",
            arch: ArchitectureConfig::Hcrnn {
                memory: M,
                maps: 3,
                kernel_rows: 12,
                kernel_cols: 1,
                kernel_depth: 1,
                rec_units: 9,
                conv_activation: Activation::Relu,
                rec_activation: Activation::Relu,
            },
            training: training(5e-3, 62),
            reference_cancellation_db: Some(44.50),
        },
        "hcrdnn1" => Preset {
            name: "hcrdnn1",
            arch: ArchitectureConfig::Hcrdnn {
                memory: M,
                maps: 2,
                kernel_rows: 12,
                kernel_cols: 1,
                kernel_depth: 1,
                rec_units: 7,
                dense_units: 11,
                conv_activation: Activation::Relu,
                rec_activation: Activation::Relu,
                dense_activation: Activation::Relu,
            },
            training: training(5e-3, 158),
            reference_cancellation_db: Some(44.44),
        },
        "hcrdnn2" => Preset {
            name: "hcrdnn2",
            arch: ArchitectureConfig::Hcrdnn {
                memory: M,
                maps: 3,
                kernel_rows: 12,
                kernel_cols: 1,
                kernel_depth: 1,
                rec_units: 5,
                dense_units: 12,
                conv_activation: Activation::Relu,
                rec_activation: Activation::Relu,
                dense_activation: Activation::Relu,
            },
            training: training(5e-3, 158),
            reference_cancellation_db: Some(44.41),
        },
        other => return Err(SicError::UnknownName(format!("preset {other:?}"))),
    };
    Ok(p)
}

// ---------------------------------------------------------------------------
// Two-stage pipeline
// ---------------------------------------------------------------------------

/// The nonlinear half of a fitted canceler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum NonlinearStage {
    /// Linear-only canceler: nothing after stage one.
    None,
    /// Closed-form memory-polynomial stage.
    Polynomial(PolyCoeffs),
    /// Trained network stage. Targets were normalized to unit RMS during
    /// training; `target_scale` restores physical units on prediction.
    Network {
        /// The trained network (best-epoch parameters).
        net: Network,
        /// RMS of the residual the network was trained on.
        target_scale: f64,
    },
}

/// A fully fitted two-stage canceler. Serializable, so fitted cancelers
/// can be checkpointed to JSON and reloaded bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CancelerPipeline {
    /// Delay-line depth both stages share.
    pub memory: usize,
    /// Stage one: least-squares FIR taps.
    pub linear: LinearTaps,
    /// Stage two.
    pub nonlinear: NonlinearStage,
    /// The architecture the pipeline was fitted as.
    pub arch: ArchitectureConfig,
}

impl CancelerPipeline {
    /// Stage-one replica only.
    pub fn linear_prediction(&self, tx: &ComplexSignal) -> Result<ComplexSignal> {
        predict_linear(tx, &self.linear)
    }

    /// Full interference replica: linear stage plus whatever the nonlinear
    /// stage adds.
    pub fn predict(&self, tx: &ComplexSignal) -> Result<ComplexSignal> {
        let linear = self.linear_prediction(tx)?;
        match &self.nonlinear {
            NonlinearStage::None => Ok(linear),
            NonlinearStage::Polynomial(poly) => {
                let nl = predict_poly(tx, poly)?;
                let samples = linear
                    .samples
                    .iter()
                    .zip(&nl.samples)
                    .map(|(a, b)| a + b)
                    .collect();
                ComplexSignal::new(samples, tx.sample_rate_hz)
            }
            NonlinearStage::Network { net, target_scale } => {
                let mut samples = linear.samples.clone();
                for (n, s) in samples.iter_mut().enumerate() {
                    let graph = build_input_graph(tx, n, self.memory)?;
                    let input = network_input(&self.arch, &graph)?;
                    let (i, q) = forward_pair(net, &input)?;
                    *s += Complex64::new(i * target_scale, q * target_scale);
                }
                ComplexSignal::new(samples, tx.sample_rate_hz)
            }
        }
    }
}

/// Knobs for [`fit_pipeline`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Training hyperparameters for network stages; `None` uses the
    /// defaults ([`TrainSettings::default`]) — presets carry their own.
    pub training: Option<TrainSettings>,
    /// Seed for network weight initialization.
    pub init_seed: u64,
    /// Drop the first `memory − 1` rows from the least-squares fits (and the
    /// corresponding network training samples), whose delay lines reach back
    /// before the first sample. Off by default: generated captures start at
    /// the true stream origin, where the zero history is physically right.
    pub drop_transient_rows: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            training: None,
            init_seed: 0,
            drop_transient_rows: false,
        }
    }
}

/// Everything [`fit_pipeline`] produces.
#[derive(Debug)]
pub struct FitResult {
    /// The fitted canceler.
    pub pipeline: CancelerPipeline,
    /// Training history for network stages; `None` for closed-form stages.
    pub train_outcome: Option<TrainOutcome>,
}

/// Trims the leading transient rows from a regressor/target pair.
fn trim_rows(
    regressor: &RegressorMatrix,
    target: &ComplexSignal,
    skip: usize,
) -> Result<(RegressorMatrix, ComplexSignal)> {
    if regressor.n_rows() <= skip {
        return Err(SicError::SignalTooShort {
            needed: skip + 1,
            got: regressor.n_rows(),
        });
    }
    let entries = regressor
        .entries
        .rows(skip, regressor.n_rows() - skip)
        .into_owned();
    let trimmed = ComplexSignal::new(target.samples[skip..].to_vec(), target.sample_rate_hz)?;
    Ok((
        RegressorMatrix {
            entries,
            column_labels: regressor.column_labels.clone(),
        },
        trimmed,
    ))
}

/// Fits the two-stage canceler.
///
/// Stage one is always the least-squares linear filter on the training
/// capture. Stage two depends on the architecture: nothing (`linear`), a
/// memory-polynomial least-squares fit on the residual (`polynomial`), or a
/// network trained on the residual by mini-batch gradient descent. Network
/// targets are normalized to unit RMS for training (stored on the pipeline
/// so predictions come back in physical units), and the held-out pair is
/// used for epoch selection.
///
/// # Arguments
/// * `tx_train`, `rx_train` - the fitting capture.
/// * `tx_test`, `rx_test` - held-out continuation, used only to pick the
///   best epoch of network stages (closed-form stages ignore it).
/// * `arch` - what to fit.
/// * `opts` - seeds, training overrides, transient handling.
pub fn fit_pipeline(
    tx_train: &ComplexSignal,
    rx_train: &ComplexSignal,
    tx_test: &ComplexSignal,
    rx_test: &ComplexSignal,
    arch: &ArchitectureConfig,
    opts: &FitOptions,
) -> Result<FitResult> {
    arch.validate()?;
    let memory = arch.memory();
    let skip = if opts.drop_transient_rows { memory - 1 } else { 0 };

    // Stage one: linear least squares.
    let taps = if skip > 0 {
        let regressor = crate::linear_canceler::build_linear_regressor(tx_train, memory)?;
        let (reg, y) = trim_rows(&regressor, rx_train, skip)?;
        LinearTaps {
            taps: ls_fit(&reg, &y)?.coeffs,
        }
    } else {
        fit_linear(tx_train, rx_train, memory)?
    };

    let res_train = residual(rx_train, &predict_linear(tx_train, &taps)?)?;

    // Stage two.
    let (nonlinear, train_outcome) = match arch {
        ArchitectureConfig::Linear { .. } => (NonlinearStage::None, None),
        ArchitectureConfig::Polynomial { order, memory } => {
            let spec = PolyBasisSpec {
                order: *order,
                memory: *memory,
                ..PolyBasisSpec::default()
            };
            let poly = if skip > 0 {
                let regressor = build_ph_regressor(tx_train, &spec)?;
                let (mut reg, y) = trim_rows(&regressor, &res_train, skip)?;
                // Mirror fit_poly's column normalization on the trimmed rows.
                let n = reg.n_rows() as f64;
                let scales: Vec<f64> = (0..reg.n_cols())
                    .map(|j| {
                        let rms = (reg.entries.column(j).norm_squared() / n).sqrt();
                        if rms > 0.0 {
                            rms
                        } else {
                            1.0
                        }
                    })
                    .collect();
                for (j, &s) in scales.iter().enumerate() {
                    reg.entries.column_mut(j).scale_mut(1.0 / s);
                }
                let solution = ls_fit(&reg, &y)?;
                PolyCoeffs {
                    spec,
                    coeffs: solution
                        .coeffs
                        .iter()
                        .zip(&scales)
                        .map(|(c, s)| c / s)
                        .collect(),
                    labels: reg.column_labels,
                }
            } else {
                fit_poly(tx_train, &res_train, &spec)?
            };
            (NonlinearStage::Polynomial(poly), None)
        }
        _ if arch.is_trainable_network() => {
            let res_test = residual(rx_test, &predict_linear(tx_test, &taps)?)?;
            let target_scale = res_train.mean_power().sqrt();
            if target_scale <= 0.0 {
                return Err(SicError::InvalidConfig(
                    "linear stage left a zero residual; nothing for a network to learn".into(),
                ));
            }
            let make_set = |tx: &ComplexSignal, res: &ComplexSignal, skip: usize| -> Result<TrainData> {
                let mut inputs = Vec::with_capacity(tx.len() - skip);
                let mut targets = Vec::with_capacity(tx.len() - skip);
                for n in skip..tx.len() {
                    let graph = build_input_graph(tx, n, memory)?;
                    inputs.push(network_input(arch, &graph)?);
                    let r = res.samples[n] / target_scale;
                    targets.push([r.re, r.im]);
                }
                TrainData::new(inputs, targets)
            };
            let train_set = make_set(tx_train, &res_train, skip)?;
            // The test segment continues the train stream mid-flight, so its
            // leading rows always carry padding transients; epoch selection
            // measures steady-state rows only.
            let test_set = make_set(tx_test, &res_test, memory.saturating_sub(1).min(tx_test.len() - 1))?;

            let net = build_network(arch, opts.init_seed)?;
            let settings = opts.training.unwrap_or_default();
            let outcome = train(net, &train_set, &test_set, &settings)?;
            (
                NonlinearStage::Network {
                    net: outcome.network.clone(),
                    target_scale,
                },
                Some(outcome),
            )
        }
        _ => {
            return Err(SicError::InvalidConfig(
                "this architecture is tracked for complexity only and cannot be fitted".into(),
            ))
        }
    };

    Ok(FitResult {
        pipeline: CancelerPipeline {
            memory,
            linear: taps,
            nonlinear,
            arch: arch.clone(),
        },
        train_outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{generate_dataset, split_dataset, DatasetConfig};

    #[test]
    fn input_graph_rows_are_delays() {
        let x = ComplexSignal::new(
            (0..5)
                .map(|n| Complex64::new(n as f64, -(n as f64)))
                .collect(),
            1.0,
        )
        .unwrap();
        let g = build_input_graph(&x, 3, 4).unwrap();
        assert_eq!(g.tensor.shape, vec![4, 2]);
        // Row m = sample (3 − m): 3, 2, 1, 0.
        assert_eq!(g.tensor.data, vec![3.0, -3.0, 2.0, -2.0, 1.0, -1.0, 0.0, 0.0]);

        // Zero padding before the first sample.
        let g0 = build_input_graph(&x, 0, 3).unwrap();
        assert_eq!(g0.tensor.data, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(build_input_graph(&x, 5, 3).is_err());
    }

    #[test]
    fn preset_networks_build_with_published_shapes() {
        // HCRNN-opt: conv 3 maps of 12×1 → B=2, C=2 → recurrent input 6.
        let p = preset("hcrnn_opt").unwrap();
        let net = build_network(&p.arch, 1).unwrap();
        assert_eq!(net.layers.len(), 4);
        assert_eq!(p.arch.conv_output_dims(), Some((2, 2)));
        // Literal parameter count: conv 3·(12+1)=39, recurrent 9·6+81+9=144,
        // output 2·9+2=20.
        assert_eq!(net.num_params(), 39 + 144 + 20);

        let p = preset("hcrdnn1").unwrap();
        let net = build_network(&p.arch, 1).unwrap();
        // conv 2·13=26, recurrent 7·4+49+7=84, dense 11·7+11=88, out 2·11+2=24.
        assert_eq!(net.num_params(), 26 + 84 + 88 + 24);

        let p = preset("hcrdnn2").unwrap();
        let net = build_network(&p.arch, 1).unwrap();
        // conv 3·13=39, recurrent 5·6+25+5=60, dense 12·5+12=72, out 2·12+2=26.
        assert_eq!(net.num_params(), 39 + 60 + 72 + 26);

        let p = preset("rv_tdnn").unwrap();
        let net = build_network(&p.arch, 1).unwrap();
        assert_eq!(net.num_params(), 26 * 18 + 18 + 18 * 2 + 2);

        let p = preset("rnn").unwrap();
        let net = build_network(&p.arch, 1).unwrap();
        assert_eq!(net.num_params(), 20 * 2 + 400 + 20 + 20 * 2 + 2);
    }

    #[test]
    fn complexity_only_presets_refuse_to_build() {
        for name in ["cv_tdnn", "lwgs", "mwgs", "deep_cv_tdnn"] {
            let p = preset(name).unwrap();
            assert!(
                build_network(&p.arch, 0).is_err(),
                "{name} should not build a trainable network"
            );
            assert!(p.training.is_none());
        }
        assert!(preset("no_such_arch").is_err());
    }

    #[test]
    fn preset_list_is_complete_and_resolvable() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert_eq!(p.name, name);
            p.arch.validate().unwrap();
        }
    }

    #[test]
    fn forward_paths_emit_finite_pairs() {
        let mut cfg = DatasetConfig::default_with_seed(2);
        cfg.n_samples = 128;
        let (tx, _) = generate_dataset(&cfg).unwrap();
        for name in ["hcrnn_opt", "hcrdnn1", "rv_tdnn", "rnn", "deep_rnn"] {
            let p = preset(name).unwrap();
            let net = build_network(&p.arch, 7).unwrap();
            let graph = build_input_graph(&tx, 64, p.arch.memory()).unwrap();
            let (i, q) = match &p.arch {
                ArchitectureConfig::Hcrnn { .. } => forward_hcrnn(&net, &graph).unwrap(),
                ArchitectureConfig::Hcrdnn { .. } => forward_hcrdnn(&net, &graph).unwrap(),
                ArchitectureConfig::RvTdnn { .. } => forward_rv_tdnn(&net, &graph).unwrap(),
                ArchitectureConfig::Rnn { .. } => forward_rnn_baseline(&net, &graph).unwrap(),
                _ => unreachable!(),
            };
            assert!(i.is_finite() && q.is_finite(), "{name}");
        }
    }

    #[test]
    fn linear_pipeline_cancels_linear_chain() {
        let mut cfg = DatasetConfig::linear_with_seed(3);
        cfg.n_samples = 4096;
        let (tx, rx) = generate_dataset(&cfg).unwrap();
        let (tx_tr, rx_tr, tx_te, rx_te) = split_dataset(&tx, &rx, 0.9).unwrap();
        let arch = ArchitectureConfig::Linear { memory: 13 };
        let fit = fit_pipeline(&tx_tr, &rx_tr, &tx_te, &rx_te, &arch, &FitOptions::default()).unwrap();
        assert!(matches!(fit.pipeline.nonlinear, NonlinearStage::None));
        assert!(fit.train_outcome.is_none());

        // On the training segment (stream origin) the replica is essentially
        // exact.
        let replica = fit.pipeline.predict(&tx_tr).unwrap();
        let err = residual(&rx_tr, &replica).unwrap();
        assert!(err.mean_power() / rx_tr.mean_power() < 1e-20);
    }

    #[test]
    fn polynomial_pipeline_beats_linear_on_nonlinear_chain() {
        let mut cfg = DatasetConfig::default_with_seed(11);
        cfg.n_samples = 6144;
        let (tx, rx) = generate_dataset(&cfg).unwrap();
        let (tx_tr, rx_tr, tx_te, rx_te) = split_dataset(&tx, &rx, 0.9).unwrap();
        let arch = ArchitectureConfig::Polynomial { order: 5, memory: 13 };
        let fit = fit_pipeline(&tx_tr, &rx_tr, &tx_te, &rx_te, &arch, &FitOptions::default()).unwrap();

        let only_linear = residual(&rx_tr, &fit.pipeline.linear_prediction(&tx_tr).unwrap()).unwrap();
        let full = residual(&rx_tr, &fit.pipeline.predict(&tx_tr).unwrap()).unwrap();
        assert!(full.mean_power() < only_linear.mean_power() / 10.0);

        // Fitted pipelines checkpoint to JSON and reload bit-exactly.
        let json = serde_json::to_string(&fit.pipeline).unwrap();
        let back: CancelerPipeline = serde_json::from_str(&json).unwrap();
        assert_eq!(fit.pipeline, back);
    }

    #[test]
    fn transient_dropping_still_recovers_the_channel() {
        let mut cfg = DatasetConfig::linear_with_seed(9);
        cfg.n_samples = 2048;
        let (tx, rx) = generate_dataset(&cfg).unwrap();
        let (tx_tr, rx_tr, tx_te, rx_te) = split_dataset(&tx, &rx, 0.9).unwrap();
        let arch = ArchitectureConfig::Linear { memory: 13 };
        let opts = FitOptions {
            drop_transient_rows: true,
            ..FitOptions::default()
        };
        let fit = fit_pipeline(&tx_tr, &rx_tr, &tx_te, &rx_te, &arch, &opts).unwrap();
        let replica = fit.pipeline.predict(&tx_tr).unwrap();
        // Skip the transient rows in the check too: the model was not asked
        // to explain them.
        let err: f64 = rx_tr.samples[12..]
            .iter()
            .zip(&replica.samples[12..])
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        assert!(err / rx_tr.mean_power() / ((rx_tr.len() - 12) as f64) < 1e-20);
    }

    #[test]
    fn network_pipeline_trains_and_reduces_residual() {
        // Small, fast smoke run: HCRNN on a short capture must learn at
        // least part of the nonlinear residual (thorough dB-level checks
        // live in the acceptance suite).
        let mut cfg = DatasetConfig::default_with_seed(5);
        cfg.n_samples = 3072;
        let (tx, rx) = generate_dataset(&cfg).unwrap();
        let (tx_tr, rx_tr, tx_te, rx_te) = split_dataset(&tx, &rx, 0.9).unwrap();
        let p = preset("hcrnn_opt").unwrap();
        let mut settings = p.training.unwrap();
        settings.epochs = 8;
        let opts = FitOptions {
            training: Some(settings),
            init_seed: 4,
            drop_transient_rows: false,
        };
        let fit = fit_pipeline(&tx_tr, &rx_tr, &tx_te, &rx_te, &p.arch, &opts).unwrap();
        let outcome = fit.train_outcome.as_ref().expect("network stage trains");
        assert_eq!(outcome.history.len(), 8);
        let first = outcome.history.first().unwrap().train_mse;
        let best = outcome.history[outcome.best_epoch].test_mse;
        assert!(
            best < first,
            "training never improved: first {first:.3e}, best {best:.3e}"
        );

        // The full replica must beat the linear stage alone on train data.
        let lin = residual(&rx_tr, &fit.pipeline.linear_prediction(&tx_tr).unwrap()).unwrap();
        let full = residual(&rx_tr, &fit.pipeline.predict(&tx_tr).unwrap()).unwrap();
        assert!(full.mean_power() < lin.mean_power());

        // Network-stage pipelines checkpoint and reload bit-exactly too,
        // prediction included.
        let json = serde_json::to_string(&fit.pipeline).unwrap();
        let back: CancelerPipeline = serde_json::from_str(&json).unwrap();
        assert_eq!(fit.pipeline, back);
        assert_eq!(
            back.predict(&tx_te).unwrap().samples,
            fit.pipeline.predict(&tx_te).unwrap().samples
        );
    }

    #[test]
    fn pipeline_rejects_complexity_only_architectures() {
        let mut cfg = DatasetConfig::default_with_seed(1);
        cfg.n_samples = 256;
        let (tx, rx) = generate_dataset(&cfg).unwrap();
        let arch = ArchitectureConfig::Lwgs {
            n_input: 13,
            n_hidden: 9,
        };
        assert!(fit_pipeline(&tx, &rx, &tx, &rx, &arch, &FitOptions::default()).is_err());
    }

    #[test]
    fn config_serialization_round_trips() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            let json = serde_json::to_string(&p.arch).unwrap();
            let back: ArchitectureConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(p.arch, back, "{name}");
        }
        // Tagged representation keeps the kind readable.
        let json = serde_json::to_string(&preset("hcrnn_opt").unwrap().arch).unwrap();
        assert!(json.contains("\"kind\":\"hcrnn\""), "{json}");
    }
}
