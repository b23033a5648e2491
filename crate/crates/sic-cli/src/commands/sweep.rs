//! `sic sweep` — train a grid of conv-recurrent configurations in parallel
//! and rank them by the cancellation-to-cost trade-off.

use std::path::PathBuf;

use anyhow::Context;
use rayon::prelude::*;

use sic_core::architectures::ArchitectureConfig;
use sic_core::complexity::complexity_of;
use sic_core::nn_engine::{Activation, OptimizerKind};
use sic_core::signals::split_dataset;

use crate::{
    custom_training, ensure_dir, fit_and_score, opt_cell, parse_axis, write_csv, DataSource,
    HOLDOUT_RATIO,
};

/// Arguments for `sic sweep`.
#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    /// Capture file prefix; when omitted, the default synthetic capture is
    /// generated in memory from --seed
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Feature-map axis: comma list or inclusive range (e.g. "2,3" or "2..4")
    #[arg(long, default_value = "2,3")]
    pub maps: String,
    /// Kernel-row axis
    #[arg(long, default_value = "2..13")]
    pub rows: String,
    /// Kernel-column axis (the input graph has 2 columns)
    #[arg(long, default_value = "1,2")]
    pub cols: String,
    /// Recurrent-unit axis
    #[arg(long = "rec-units", default_value = "4..10")]
    pub rec_units: String,
    /// Dense-unit axis; providing it switches the whole grid to the
    /// conv-recurrent-dense kind
    #[arg(long = "dense-units")]
    pub dense_units: Option<String>,
    /// Training epochs per grid point (short by default: a screening pass)
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Override the mini-batch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// Override the learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override the optimizer (sgd, adam, rmsprop, adadelta, adamax)
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Base seed; grid point i trains with seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for sweep.csv
    #[arg(long, default_value = "sweep-out")]
    pub out: PathBuf,
}

struct GridPoint {
    index: usize,
    config: ArchitectureConfig,
    maps: usize,
    rows: usize,
    cols: usize,
    rec_units: usize,
    dense_units: Option<usize>,
}

struct SweepRow {
    point: GridPoint,
    params: usize,
    flops: usize,
    linear_db: f64,
    total_db: f64,
    best_epoch: Option<usize>,
    seed: u64,
}

fn build_grid(args: &SweepArgs) -> anyhow::Result<Vec<GridPoint>> {
    const MEMORY: usize = 13;
    let maps = parse_axis(&args.maps).context("--maps")?;
    let rows = parse_axis(&args.rows).context("--rows")?;
    let cols = parse_axis(&args.cols).context("--cols")?;
    let rec = parse_axis(&args.rec_units).context("--rec-units")?;
    let dense: Vec<Option<usize>> = match &args.dense_units {
        None => vec![None],
        Some(axis) => parse_axis(axis)
            .context("--dense-units")?
            .into_iter()
            .map(Some)
            .collect(),
    };

    let mut grid = Vec::new();
    for &l in &maps {
        for &r in &rows {
            for &s in &cols {
                for &nhr in &rec {
                    for &nhd in &dense {
                        let config = match nhd {
                            None => ArchitectureConfig::Hcrnn {
                                memory: MEMORY,
                                maps: l,
                                kernel_rows: r,
                                kernel_cols: s,
                                kernel_depth: 1,
                                rec_units: nhr,
                                conv_activation: Activation::Relu,
                                rec_activation: Activation::Relu,
                            },
                            Some(nhd) => ArchitectureConfig::Hcrdnn {
                                memory: MEMORY,
                                maps: l,
                                kernel_rows: r,
                                kernel_cols: s,
                                kernel_depth: 1,
                                rec_units: nhr,
                                dense_units: nhd,
                                conv_activation: Activation::Relu,
                                rec_activation: Activation::Relu,
                                dense_activation: Activation::Relu,
                            },
                        };
                        config.validate().with_context(|| {
                            format!("grid point l={l} r={r} s={s} nhr={nhr} nhd={nhd:?}")
                        })?;
                        grid.push(GridPoint {
                            index: grid.len(),
                            config,
                            maps: l,
                            rows: r,
                            cols: s,
                            rec_units: nhr,
                            dense_units: nhd,
                        });
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Runs the verb.
pub fn run(args: &SweepArgs) -> anyhow::Result<()> {
    let grid = build_grid(args)?;
    let kind = if args.dense_units.is_some() { "hcrdnn" } else { "hcrnn" };
    println!(
        "sweeping {} {kind} configurations, {} epochs each",
        grid.len(),
        args.epochs
    );

    let mut settings = custom_training();
    settings.epochs = args.epochs;
    if let Some(b) = args.batch {
        settings.batch_size = b;
    }
    if let Some(l) = args.lr {
        settings.learning_rate = l;
    }
    if let Some(o) = &args.optimizer {
        settings.optimizer = OptimizerKind::parse(o)?;
    }

    let (tx, rx) = DataSource::from_flags(args.data.as_deref(), args.seed).realize()?;
    let (tx_tr, rx_tr, tx_te, rx_te) = split_dataset(&tx, &rx, HOLDOUT_RATIO)?;

    // Grid points are independent; seeding by grid index keeps every point
    // reproducible no matter which worker picks it up.
    let mut rows: Vec<SweepRow> = grid
        .into_par_iter()
        .map(|point| -> anyhow::Result<SweepRow> {
            let seed = args.seed.wrapping_add(point.index as u64);
            let run = fit_and_score(
                &tx_tr,
                &rx_tr,
                &tx_te,
                &rx_te,
                &point.config,
                Some(settings),
                seed,
            )?;
            let cost = complexity_of(&point.config)?;
            Ok(SweepRow {
                point,
                params: cost.params,
                flops: cost.flops,
                linear_db: run.report.linear_only_db,
                total_db: run.report.total_db,
                best_epoch: run.best_epoch,
                seed,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    // Rank: best cancellation first; cheaper FLOPs break ties, then grid
    // order for full determinism.
    rows.sort_by(|a, b| {
        b.total_db
            .total_cmp(&a.total_db)
            .then(a.flops.cmp(&b.flops))
            .then(a.point.index.cmp(&b.point.index))
    });

    ensure_dir(&args.out)?;
    let csv_path = args.out.join("sweep.csv");
    write_csv(
        &csv_path,
        "rank,index,kind,maps,kernel_rows,kernel_cols,rec_units,dense_units,\
         params,flops,linear_db,total_db,best_epoch,seed",
        rows.iter().enumerate().map(|(rank, r)| {
            format!(
                "{rank},{},{kind},{},{},{},{},{},{},{},{},{},{},{}",
                r.point.index,
                r.point.maps,
                r.point.rows,
                r.point.cols,
                r.point.rec_units,
                opt_cell(r.point.dense_units),
                r.params,
                r.flops,
                r.linear_db,
                r.total_db,
                opt_cell(r.best_epoch),
                r.seed
            )
        }),
    )?;

    println!(
        "{:<5} {:<24} {:>7} {:>7} {:>9} {:>9}",
        "rank", "config", "params", "flops", "lin_db", "total_db"
    );
    for (rank, r) in rows.iter().take(10).enumerate() {
        let cfg = format!(
            "l={} r={} s={} nhr={}{}",
            r.point.maps,
            r.point.rows,
            r.point.cols,
            r.point.rec_units,
            r.point
                .dense_units
                .map(|d| format!(" nhd={d}"))
                .unwrap_or_default()
        );
        println!(
            "{:<5} {:<24} {:>7} {:>7} {:>9.2} {:>9.2}",
            rank, cfg, r.params, r.flops, r.linear_db, r.total_db
        );
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}
