//! Command-line toolkit over the `sic-core` library.
//!
//! Five verbs cover the experiment loop for digital self-interference
//! cancellation:
//!
//! * `generate` — synthesize a transmit/receive capture and save it as CSV;
//! * `train` — fit a two-stage canceler (linear least squares first, the
//!   configured nonlinear stage on the residual), repeated over several
//!   network initializations, and checkpoint the best;
//! * `eval` — score a checkpoint on a capture: cancellation figures,
//!   per-sample predictions, loss curves, and residual spectra as CSV;
//! * `complexity` — closed-form parameter/FLOP tables for named or custom
//!   architectures against a baseline;
//! * `sweep` — train a whole grid of conv-recurrent configurations in
//!   parallel and rank them by cancellation and cost.
//!
//! Every command is deterministic for fixed seeds: running it twice
//! produces byte-identical output files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sic_core::architectures::{
    fit_pipeline, network_input, preset, ArchitectureConfig, CancelerPipeline, FitOptions,
    NonlinearStage,
};
use sic_core::linear_canceler::residual;
use sic_core::metrics::{evaluate_canceler, CancellationReport};
use sic_core::nn_engine::{
    dataset_mse, Activation, EpochStats, OptimizerKind, TrainData, TrainSettings,
};
use sic_core::signals::{generate_dataset, load_dataset, ComplexSignal, DatasetConfig};

pub mod commands;

/// Fraction of a capture used for fitting; the remainder is held out for
/// epoch selection and scoring. Fixed so that `train` and `eval` always
/// agree on where the boundary sits.
pub const HOLDOUT_RATIO: f64 = 0.9;

/// Top-level argument parser.
#[derive(Debug, Parser)]
#[command(
    name = "sic",
    version,
    about = "Digital self-interference cancellation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// The five verbs.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a transmit/receive capture and write it as CSV
    Generate(commands::generate::GenerateArgs),
    /// Fit a canceler on a capture and write a checkpoint
    Train(commands::train::TrainArgs),
    /// Score a checkpoint on a capture and emit CSV reports
    Eval(commands::eval::EvalArgs),
    /// Print cost tables for canceler architectures
    Complexity(commands::complexity::ComplexityArgs),
    /// Train a grid of conv-recurrent configurations and rank them
    Sweep(commands::sweep::SweepArgs),
}

/// Runs one parsed command to completion.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate(args) => commands::generate::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Complexity(args) => commands::complexity::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
    }
}

// ---------------------------------------------------------------------------
// Architecture resolution
// ---------------------------------------------------------------------------

/// An architecture argument resolved to something runnable: either a named
/// preset or a parsed custom configuration.
#[derive(Debug, Clone)]
pub struct ResolvedArch {
    /// The string the user passed, canonicalized.
    pub name: String,
    /// Structural description.
    pub config: ArchitectureConfig,
    /// Training hyperparameters, when the architecture trains.
    pub training: Option<TrainSettings>,
    /// Benchmark cancellation this configuration is known for, if any.
    pub reference_db: Option<f64>,
}

/// Training defaults for custom conv-recurrent configs (and the `sweep`
/// grid): the settings the conv-recurrent preset family uses.
pub(crate) fn custom_training() -> TrainSettings {
    TrainSettings {
        epochs: 50,
        batch_size: 62,
        learning_rate: 5e-3,
        optimizer: OptimizerKind::Adam,
        shuffle_seed: 0,
    }
}

/// Resolves an `--arch` argument.
///
/// Accepts any preset name (`linear`, `poly_p5`, `hcrnn_opt`, …) or a custom
/// conv-recurrent spec:
///
/// ```text
/// hcrnn:l=3,r=12,s=1,z=1,nhr=9
/// hcrdnn:l=2,r=12,nhr=7,nhd=11
/// ```
///
/// Keys: `l` feature maps, `r`/`s`/`z` kernel rows/cols/depth (`s`, `z`
/// default 1), `nhr` recurrent units, `nhd` dense units (hcrdnn only),
/// `m` delay-line depth (default 13). Custom configs use ReLU throughout.
pub fn resolve_arch(spec: &str) -> anyhow::Result<ResolvedArch> {
    if let Ok(p) = preset(spec) {
        return Ok(ResolvedArch {
            name: p.name.to_string(),
            config: p.arch,
            training: p.training,
            reference_db: p.reference_cancellation_db,
        });
    }
    let Some((kind, body)) = spec.split_once(':') else {
        bail!(
            "unknown architecture {spec:?}; expected a preset name or a custom \
             spec like \"hcrnn:l=3,r=12,s=1,z=1,nhr=9\""
        );
    };

    let mut fields = std::collections::BTreeMap::new();
    for pair in body.split(',') {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("malformed field {pair:?} in {spec:?} (want key=value)"))?;
        let value: usize = value
            .parse()
            .with_context(|| format!("field {key}={value:?} in {spec:?} is not a count"))?;
        fields.insert(key.trim().to_string(), value);
    }
    let mut take = |key: &str| fields.remove(key);
    let require = |opt: Option<usize>, key: &str| {
        opt.with_context(|| format!("custom spec {spec:?} is missing {key}"))
    };

    let memory = take("m").unwrap_or(13);
    let maps = require(take("l"), "l")?;
    let kernel_rows = require(take("r"), "r")?;
    let kernel_cols = take("s").unwrap_or(1);
    let kernel_depth = take("z").unwrap_or(1);
    let rec_units = require(take("nhr"), "nhr")?;

    let config = match kind {
        "hcrnn" => ArchitectureConfig::Hcrnn {
            memory,
            maps,
            kernel_rows,
            kernel_cols,
            kernel_depth,
            rec_units,
            conv_activation: Activation::Relu,
            rec_activation: Activation::Relu,
        },
        "hcrdnn" => ArchitectureConfig::Hcrdnn {
            memory,
            maps,
            kernel_rows,
            kernel_cols,
            kernel_depth,
            rec_units,
            dense_units: require(take("nhd"), "nhd")?,
            conv_activation: Activation::Relu,
            rec_activation: Activation::Relu,
            dense_activation: Activation::Relu,
        },
        other => bail!("unknown custom architecture kind {other:?} (want hcrnn or hcrdnn)"),
    };
    if let Some(extra) = fields.keys().next() {
        bail!("unknown field {extra:?} in custom spec {spec:?}");
    }
    config.validate()?;
    Ok(ResolvedArch {
        name: spec.to_string(),
        config,
        training: Some(custom_training()),
        reference_db: None,
    })
}

/// Applies CLI training overrides to an architecture's base settings.
/// Rejects overrides on closed-form architectures, where no training runs.
pub fn apply_training_overrides(
    arch: &ResolvedArch,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    optimizer: Option<&str>,
) -> anyhow::Result<Option<TrainSettings>> {
    let any_override = epochs.is_some() || batch.is_some() || lr.is_some() || optimizer.is_some();
    let Some(mut settings) = arch.training else {
        ensure!(
            !any_override,
            "the {} canceler is solved in closed form; training flags do not apply",
            arch.name
        );
        return Ok(None);
    };
    if let Some(e) = epochs {
        settings.epochs = e;
    }
    if let Some(b) = batch {
        settings.batch_size = b;
    }
    if let Some(l) = lr {
        settings.learning_rate = l;
    }
    if let Some(o) = optimizer {
        settings.optimizer = OptimizerKind::parse(o)?;
    }
    Ok(Some(settings))
}

// ---------------------------------------------------------------------------
// Dataset plumbing
// ---------------------------------------------------------------------------

/// Where a run's capture comes from. Exactly one source by construction.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Synthesize in memory from a config.
    Generate(Box<DatasetConfig>),
    /// Load a saved capture by file prefix.
    Files(PathBuf),
}

impl DataSource {
    /// From CLI flags: a `--data` prefix when given, otherwise the default
    /// synthetic chain seeded by `seed`.
    pub fn from_flags(data: Option<&Path>, seed: u64) -> Self {
        match data {
            Some(prefix) => Self::Files(prefix.to_path_buf()),
            None => Self::Generate(Box::new(DatasetConfig::default_with_seed(seed))),
        }
    }

    /// Produces the capture.
    pub fn realize(&self) -> anyhow::Result<(ComplexSignal, ComplexSignal)> {
        match self {
            Self::Generate(cfg) => {
                let (tx, rx) = generate_dataset(cfg)?;
                eprintln!(
                    "generated synthetic capture: {} samples, seed {}",
                    cfg.n_samples, cfg.seed
                );
                Ok((tx, rx))
            }
            Self::Files(prefix) => {
                load_dataset(prefix).with_context(|| format!("loading {}", prefix.display()))
            }
        }
    }
}

/// A fully resolved training run: one dataset source, one architecture,
/// `n_inits` repetitions from distinct seeds.
#[derive(Debug)]
pub struct RunSpec {
    pub source: DataSource,
    pub arch: ResolvedArch,
    /// Resolved settings (preset defaults plus CLI overrides); `None` for
    /// closed-form stages.
    pub training: Option<TrainSettings>,
    pub n_inits: usize,
    pub base_seed: u64,
    pub out_dir: PathBuf,
}

impl RunSpec {
    /// Validates the run description.
    pub fn new(
        source: DataSource,
        arch: ResolvedArch,
        training: Option<TrainSettings>,
        n_inits: usize,
        base_seed: u64,
        out_dir: PathBuf,
    ) -> anyhow::Result<Self> {
        ensure!(n_inits >= 1, "--inits must be at least 1");
        ensure!(
            arch.config.is_trainable_network()
                || matches!(
                    arch.config,
                    ArchitectureConfig::Linear { .. } | ArchitectureConfig::Polynomial { .. }
                ),
            "the {} architecture is tracked for complexity only and cannot be fitted",
            arch.name
        );
        Ok(Self {
            source,
            arch,
            training,
            n_inits,
            base_seed,
            out_dir,
        })
    }

    /// Initialization seed for repetition `i`.
    pub fn init_seed(&self, i: usize) -> u64 {
        self.base_seed.wrapping_add(i as u64)
    }
}

// ---------------------------------------------------------------------------
// Fitting and checkpoints
// ---------------------------------------------------------------------------

/// One fitted repetition with its held-out score.
#[derive(Debug)]
pub struct InitRun {
    pub init_seed: u64,
    pub pipeline: CancelerPipeline,
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub report: CancellationReport,
}

/// Fits one pipeline and scores it on the held-out segment. The sample
/// shuffle is tied to `init_seed`, so repetitions differ in both weight
/// draw and data order while staying individually reproducible.
pub fn fit_and_score(
    tx_tr: &ComplexSignal,
    rx_tr: &ComplexSignal,
    tx_te: &ComplexSignal,
    rx_te: &ComplexSignal,
    config: &ArchitectureConfig,
    training: Option<TrainSettings>,
    init_seed: u64,
) -> anyhow::Result<InitRun> {
    let training = training.map(|mut t| {
        t.shuffle_seed = init_seed;
        t
    });
    let opts = FitOptions {
        training,
        init_seed,
        drop_transient_rows: false,
    };
    let fit = fit_pipeline(tx_tr, rx_tr, tx_te, rx_te, config, &opts)?;
    let report = evaluate_canceler(&fit.pipeline, tx_te, rx_te)?;
    let (history, best_epoch) = match fit.train_outcome {
        Some(outcome) => (outcome.history, Some(outcome.best_epoch)),
        None => (Vec::new(), None),
    };
    Ok(InitRun {
        init_seed,
        pipeline: fit.pipeline,
        history,
        best_epoch,
        report,
    })
}

/// Everything needed to reuse a fitted canceler later: the pipeline itself
/// plus the provenance (`eval` recomputes scores from these exactly).
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    /// The `--arch` string the pipeline was fitted as.
    pub arch: String,
    /// Initialization seed of this repetition.
    pub init_seed: u64,
    /// Settings the network stage trained with, if any.
    pub training: Option<TrainSettings>,
    /// Per-epoch loss history (empty for closed-form stages).
    pub history: Vec<EpochStats>,
    /// Index of the retained epoch in `history`.
    pub best_epoch: Option<usize>,
    /// Held-out score recorded at fit time.
    pub fit_report: CancellationReport,
    /// The fitted two-stage canceler.
    pub pipeline: CancelerPipeline,
}

impl Checkpoint {
    /// Writes pretty JSON.
    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Reads a checkpoint back.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Recomputes the network-domain training loss of a pipeline's nonlinear
/// stage over a capture segment: the same normalized residual targets the
/// stage was fitted on, fed through the stored network. Returns `None` for
/// pipelines without a network stage.
///
/// With `skip = 0` on the training segment this reproduces the checkpoint's
/// recorded `train_mse` at the retained epoch bit for bit; with
/// `skip = memory − 1` on the held-out segment it reproduces `test_mse`.
pub fn network_domain_mse(
    pipeline: &CancelerPipeline,
    tx: &ComplexSignal,
    rx: &ComplexSignal,
    skip: usize,
) -> anyhow::Result<Option<f64>> {
    let NonlinearStage::Network { net, target_scale } = &pipeline.nonlinear else {
        return Ok(None);
    };
    let res = residual(rx, &pipeline.linear_prediction(tx)?)?;
    let mut inputs = Vec::with_capacity(tx.len().saturating_sub(skip));
    let mut targets = Vec::with_capacity(inputs.capacity());
    for n in skip..tx.len() {
        let graph = sic_core::architectures::build_input_graph(tx, n, pipeline.memory)?;
        inputs.push(network_input(&pipeline.arch, &graph)?);
        let r = res.samples[n] / target_scale;
        targets.push([r.re, r.im]);
    }
    let data = TrainData::new(inputs, targets)?;
    Ok(Some(dataset_mse(net, &data)?))
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

/// Creates `dir` (and parents) if needed.
pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes a CSV file: header line plus rows, `\n` endings, no trailing
/// blank line beyond the final newline.
pub fn write_csv(
    path: &Path,
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a sweep axis: `"4"`, `"2,3,5"`, or an inclusive range `"2..13"`.
pub fn parse_axis(text: &str) -> anyhow::Result<Vec<usize>> {
    let text = text.trim();
    let values: Vec<usize> = if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().context("axis range start")?;
        let hi: usize = hi.trim().parse().context("axis range end")?;
        ensure!(lo <= hi, "empty axis range {text:?}");
        (lo..=hi).collect()
    } else {
        text.split(',')
            .map(|v| v.trim().parse::<usize>().with_context(|| format!("axis value {v:?}")))
            .collect::<anyhow::Result<_>>()?
    };
    ensure!(!values.is_empty(), "empty axis {text:?}");
    Ok(values)
}

/// Formats an `Option` cell for CSV: empty when absent.
pub fn opt_cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Quotes a CSV field when it needs it (commas in custom architecture
/// specs, mainly); plain values pass through untouched.
pub fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_resolution_accepts_presets_and_customs() {
        let p = resolve_arch("hcrnn_opt").unwrap();
        assert_eq!(p.name, "hcrnn_opt");
        assert!(p.training.is_some());
        assert_eq!(p.reference_db, Some(44.50));

        let c = resolve_arch("hcrnn:l=2,r=8,s=1,z=1,nhr=6").unwrap();
        assert_eq!(
            c.config,
            ArchitectureConfig::Hcrnn {
                memory: 13,
                maps: 2,
                kernel_rows: 8,
                kernel_cols: 1,
                kernel_depth: 1,
                rec_units: 6,
                conv_activation: Activation::Relu,
                rec_activation: Activation::Relu,
            }
        );
        assert!(c.reference_db.is_none());

        // Defaults: s = 1, z = 1, m = 13.
        let d = resolve_arch("hcrdnn:l=2,r=12,nhr=7,nhd=11").unwrap();
        match d.config {
            ArchitectureConfig::Hcrdnn {
                memory,
                kernel_cols,
                kernel_depth,
                dense_units,
                ..
            } => {
                assert_eq!((memory, kernel_cols, kernel_depth, dense_units), (13, 1, 1, 11));
            }
            other => panic!("wrong kind: {other:?}"),
        }

        for bad in [
            "no_such_preset",
            "hcrnn:l=2",                    // missing r, nhr
            "hcrnn:l=2,r=8,nhr=6,bogus=1",  // unknown key
            "hcrnn:l=two,r=8,nhr=6",        // not a count
            "mystery:l=2,r=8,nhr=6",        // unknown kind
            "hcrnn:l=2,r=40,nhr=6",         // kernel taller than the graph
        ] {
            assert!(resolve_arch(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn training_overrides_apply_only_where_training_exists() {
        let nn = resolve_arch("hcrnn_opt").unwrap();
        let s = apply_training_overrides(&nn, Some(7), None, Some(1e-2), Some("rmsprop"))
            .unwrap()
            .unwrap();
        assert_eq!(s.epochs, 7);
        assert_eq!(s.batch_size, 62); // preset value kept
        assert_eq!(s.learning_rate, 1e-2);
        assert_eq!(s.optimizer, OptimizerKind::RmsProp);

        let poly = resolve_arch("poly_p5").unwrap();
        assert!(apply_training_overrides(&poly, None, None, None, None)
            .unwrap()
            .is_none());
        assert!(apply_training_overrides(&poly, Some(5), None, None, None).is_err());
        assert!(apply_training_overrides(&nn, None, None, None, Some("sgdd")).is_err());
    }

    #[test]
    fn run_spec_validates_inits_and_kind() {
        let arch = resolve_arch("linear").unwrap();
        let src = DataSource::from_flags(None, 1);
        assert!(RunSpec::new(src, arch, None, 0, 1, PathBuf::from(".")).is_err());

        let cvt = resolve_arch("cv_tdnn").unwrap();
        let src = DataSource::from_flags(None, 1);
        assert!(RunSpec::new(src, cvt, None, 1, 1, PathBuf::from(".")).is_err());
    }

    #[test]
    fn axis_parser_handles_ranges_and_lists() {
        assert_eq!(parse_axis("4").unwrap(), vec![4]);
        assert_eq!(parse_axis("2,3,5").unwrap(), vec![2, 3, 5]);
        assert_eq!(parse_axis("2..5").unwrap(), vec![2, 3, 4, 5]);
        assert!(parse_axis("5..2").is_err());
        assert!(parse_axis("a,b").is_err());
    }
}
