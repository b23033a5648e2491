//! `sic generate` — synthesize a capture and save it.

use std::path::PathBuf;

use anyhow::bail;

use sic_core::signals::{generate_dataset, save_dataset, DatasetConfig};

use crate::ensure_dir;

/// Arguments for `sic generate`.
#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    /// PRNG seed for symbols and noise
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Capture length in samples
    #[arg(long, default_value_t = 20480)]
    pub n: usize,
    /// Signal chain: "default" (IQ imbalance, nonlinear PA, multipath) or
    /// "linear" (multipath only)
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// Add receiver noise at this level in dB relative to the interference
    /// power (e.g. -48); omit for a noiseless capture
    #[arg(long = "noise-dbc", allow_negative_numbers = true)]
    pub noise_dbc: Option<f64>,
    /// Output path prefix: writes <out>.tx.csv, <out>.rx.csv, <out>.meta.json
    #[arg(long, default_value = "capture")]
    pub out: PathBuf,
}

/// Runs the verb.
pub fn run(args: &GenerateArgs) -> anyhow::Result<()> {
    let mut cfg = match args.preset.as_str() {
        "default" => DatasetConfig::default_with_seed(args.seed),
        "linear" => DatasetConfig::linear_with_seed(args.seed),
        other => bail!("unknown generation preset {other:?} (want \"default\" or \"linear\")"),
    };
    cfg.n_samples = args.n;
    cfg.noise_floor_dbc = args.noise_dbc;

    let (tx, rx) = generate_dataset(&cfg)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    let noise = args
        .noise_dbc
        .map(|v| format!("{v} dBc"))
        .unwrap_or_else(|| "none".into());
    let description = format!(
        "synthetic full-duplex capture: chain={}, seed={}, noise={}",
        args.preset, args.seed, noise
    );
    save_dataset(&args.out, &tx, &rx, &description)?;

    println!(
        "wrote {} samples to {}.{{tx.csv,rx.csv,meta.json}}",
        tx.len(),
        args.out.display()
    );
    println!(
        "chain {}, seed {}, noise {}, interference mean power {:.4e}",
        args.preset,
        args.seed,
        noise,
        rx.mean_power()
    );
    Ok(())
}
