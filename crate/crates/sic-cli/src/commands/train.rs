//! `sic train` — fit a two-stage canceler, repeated over several
//! initialization seeds, and checkpoint the best repetition.

use std::path::PathBuf;

use sic_core::metrics::CancellationReport;
use sic_core::signals::split_dataset;

use crate::{
    apply_training_overrides, ensure_dir, fit_and_score, opt_cell, resolve_arch, write_csv,
    Checkpoint, DataSource, InitRun, RunSpec, HOLDOUT_RATIO,
};

/// Arguments for `sic train`.
#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Architecture: a preset name (`linear`, `poly_p5`, `hcrnn_opt`, …) or
    /// a custom spec like "hcrnn:l=3,r=12,s=1,z=1,nhr=9"
    #[arg(long)]
    pub arch: String,
    /// Capture file prefix (from `sic generate`); when omitted, the default
    /// synthetic capture is generated in memory from --seed
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of repetitions with distinct initialization seeds
    #[arg(long, default_value_t = 1)]
    pub inits: usize,
    /// Base seed: repetition i initializes (and shuffles) with seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the architecture's training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the mini-batch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// Override the learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override the optimizer (sgd, adam, rmsprop, adadelta, adamax)
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Output directory for train_runs.csv, checkpoint.json, history.csv
    #[arg(long, default_value = "train-out")]
    pub out: PathBuf,
}

/// What `execute` hands back (the files carry the full detail).
#[derive(Debug)]
pub struct TrainSummary {
    /// Held-out report of every repetition, in seed order.
    pub reports: Vec<CancellationReport>,
    /// Arithmetic mean of the per-repetition total cancellation, dB.
    pub mean_total_db: f64,
    /// Index of the checkpointed (best) repetition.
    pub best_index: usize,
    /// Where the checkpoint was written.
    pub checkpoint_path: PathBuf,
}

/// Runs the verb.
pub fn run(args: &TrainArgs) -> anyhow::Result<()> {
    let arch = resolve_arch(&args.arch)?;
    let training = apply_training_overrides(
        &arch,
        args.epochs,
        args.batch,
        args.lr,
        args.optimizer.as_deref(),
    )?;
    let mut inits = args.inits;
    if training.is_none() && inits > 1 {
        eprintln!(
            "note: {} is solved in closed form; one fit replaces {} repetitions",
            arch.name, inits
        );
        inits = 1;
    }
    let spec = RunSpec::new(
        DataSource::from_flags(args.data.as_deref(), args.seed),
        arch,
        training,
        inits,
        args.seed,
        args.out.clone(),
    )?;
    execute(&spec)?;
    Ok(())
}

/// Fits `spec.n_inits` repetitions, writes the artifacts, prints the
/// summary, and returns it.
pub fn execute(spec: &RunSpec) -> anyhow::Result<TrainSummary> {
    let (tx, rx) = spec.source.realize()?;
    let (tx_tr, rx_tr, tx_te, rx_te) = split_dataset(&tx, &rx, HOLDOUT_RATIO)?;

    let mut runs: Vec<InitRun> = Vec::with_capacity(spec.n_inits);
    for i in 0..spec.n_inits {
        let seed = spec.init_seed(i);
        let run = fit_and_score(
            &tx_tr,
            &rx_tr,
            &tx_te,
            &rx_te,
            &spec.arch.config,
            spec.training,
            seed,
        )?;
        println!(
            "init {i} (seed {seed}): linear {:.2} dB, total {:.2} dB{}",
            run.report.linear_only_db,
            run.report.total_db,
            run.best_epoch
                .map(|e| format!(", best epoch {e}"))
                .unwrap_or_default()
        );
        runs.push(run);
    }

    let mean_total_db =
        runs.iter().map(|r| r.report.total_db).sum::<f64>() / runs.len() as f64;
    let best_index = runs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.report.total_db.total_cmp(&b.1.report.total_db))
        .map(|(i, _)| i)
        .expect("n_inits >= 1");

    ensure_dir(&spec.out_dir)?;
    write_csv(
        &spec.out_dir.join("train_runs.csv"),
        "init,seed,linear_db,total_db,mse,best_epoch",
        runs.iter().enumerate().map(|(i, r)| {
            format!(
                "{i},{},{},{},{},{}",
                r.init_seed,
                r.report.linear_only_db,
                r.report.total_db,
                r.report.mse,
                opt_cell(r.best_epoch)
            )
        }),
    )?;

    let best = &runs[best_index];
    let checkpoint_path = spec.out_dir.join("checkpoint.json");
    Checkpoint {
        arch: spec.arch.name.clone(),
        init_seed: best.init_seed,
        training: spec.training,
        history: best.history.clone(),
        best_epoch: best.best_epoch,
        fit_report: best.report,
        pipeline: best.pipeline.clone(),
    }
    .save(&checkpoint_path)?;

    if !best.history.is_empty() {
        write_csv(
            &spec.out_dir.join("history.csv"),
            "epoch,train_mse,test_mse",
            best.history
                .iter()
                .map(|e| format!("{},{},{}", e.epoch, e.train_mse, e.test_mse)),
        )?;
    }

    let rep = best.report;
    println!(
        "mean total over {} init(s): {:.2} dB; checkpointed init {} ({} params, {} FLOPs/sample)",
        runs.len(),
        mean_total_db,
        best_index,
        rep.params,
        rep.flops
    );
    println!("wrote {}", checkpoint_path.display());

    Ok(TrainSummary {
        reports: runs.iter().map(|r| r.report).collect(),
        mean_total_db,
        best_index,
        checkpoint_path,
    })
}
