//! `sic eval` — score a checkpoint on a capture and emit CSV reports.

use std::path::{Path, PathBuf};

use serde::Serialize;

use sic_core::linear_canceler::residual;
use sic_core::metrics::{
    evaluate_canceler, psd_welch, CancellationReport, PsdConfig, PsdEstimate, WindowKind,
};
use sic_core::signals::{load_dataset, split_dataset, ComplexSignal};

use crate::{ensure_dir, network_domain_mse, write_csv, Checkpoint, HOLDOUT_RATIO};

/// Arguments for `sic eval`.
#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Checkpoint written by `sic train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Capture file prefix to score on
    #[arg(long)]
    pub data: PathBuf,
    /// Which part of the capture to score
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Output directory for the CSV reports
    #[arg(long, default_value = "eval-out")]
    pub out: PathBuf,
}

/// Capture segment selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    /// The fitting portion (first 90%)
    Train,
    /// The held-out portion (last 10%)
    Test,
    /// The whole capture
    Full,
}

impl SplitChoice {
    fn label(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
            Self::Full => "full",
        }
    }
}

/// The JSON report `eval` writes next to the CSVs.
#[derive(Debug, Serialize)]
struct EvalReport {
    arch: String,
    split: &'static str,
    scores: CancellationReport,
    /// Training-domain loss of the network stage over the scored segment
    /// (matches the checkpoint history at the retained epoch); absent for
    /// closed-form stages and for `--split full`.
    #[serde(skip_serializing_if = "Option::is_none")]
    network_mse: Option<f64>,
}

fn write_psd(path: &Path, psd: &PsdEstimate) -> anyhow::Result<()> {
    write_csv(
        path,
        "freq_hz,power_db",
        psd.freqs_hz
            .iter()
            .zip(psd.power_db())
            .map(|(f, p)| format!("{f},{p}")),
    )
}

/// Largest power-of-two Welch segment that fits the signal, up to the
/// default 1024; `None` when the signal is too short for a useful estimate.
fn psd_segment_len(n: usize) -> Option<usize> {
    if n < 16 {
        return None;
    }
    let cap = n.min(1024);
    Some(1 << (usize::BITS - 1 - cap.leading_zeros()))
}

/// Runs the verb.
pub fn run(args: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (tx, rx) = load_dataset(&args.data)?;
    let (seg_tx, seg_rx): (ComplexSignal, ComplexSignal) = match args.split {
        SplitChoice::Full => (tx, rx),
        SplitChoice::Train => {
            let (tx_tr, rx_tr, _, _) = split_dataset(&tx, &rx, HOLDOUT_RATIO)?;
            (tx_tr, rx_tr)
        }
        SplitChoice::Test => {
            let (_, _, tx_te, rx_te) = split_dataset(&tx, &rx, HOLDOUT_RATIO)?;
            (tx_te, rx_te)
        }
    };

    let pipeline = &ckpt.pipeline;
    let scores = evaluate_canceler(pipeline, &seg_tx, &seg_rx)?;

    // Recompute the network stage's training-domain loss over the same
    // rows the fit used for this segment, so the number is comparable to
    // the checkpoint's history: the fit saw the training segment from its
    // first row but measured held-out loss in steady state only.
    let network_mse = match args.split {
        SplitChoice::Train => network_domain_mse(pipeline, &seg_tx, &seg_rx, 0)?,
        SplitChoice::Test => {
            network_domain_mse(pipeline, &seg_tx, &seg_rx, pipeline.memory - 1)?
        }
        SplitChoice::Full => None,
    };

    ensure_dir(&args.out)?;

    // Per-sample predictions and residuals over the scored (steady-state)
    // region — the report's dB figures recompute exactly from these rows.
    let replica = pipeline.predict(&seg_tx)?;
    let skip = scores.skipped;
    write_csv(
        &args.out.join("predictions.csv"),
        "index,actual_i,actual_q,predicted_i,predicted_q,residual_i,residual_q",
        (skip..seg_rx.len()).map(|n| {
            let a = seg_rx.samples[n];
            let p = replica.samples[n];
            let r = a - p;
            format!("{n},{},{},{},{},{},{}", a.re, a.im, p.re, p.im, r.re, r.im)
        }),
    )?;

    // Spectra of the interference and both residuals, same region.
    if let Some(seg_len) = psd_segment_len(seg_rx.len() - skip) {
        let psd_cfg = PsdConfig {
            segment_length: seg_len,
            overlap: 0.5,
            window: WindowKind::Hann,
        };
        let tail = |s: &ComplexSignal| {
            ComplexSignal::new(s.samples[skip..].to_vec(), s.sample_rate_hz)
        };
        let rx_tail = tail(&seg_rx)?;
        let lin_res = residual(&rx_tail, &tail(&pipeline.linear_prediction(&seg_tx)?)?)?;
        let full_res = residual(&rx_tail, &tail(&replica)?)?;
        write_psd(&args.out.join("psd_rx.csv"), &psd_welch(&rx_tail, &psd_cfg)?)?;
        write_psd(
            &args.out.join("psd_linear_canceled.csv"),
            &psd_welch(&lin_res, &psd_cfg)?,
        )?;
        write_psd(
            &args.out.join("psd_canceled.csv"),
            &psd_welch(&full_res, &psd_cfg)?,
        )?;
    } else {
        eprintln!("note: segment too short for a spectrum estimate; PSD files skipped");
    }

    if !ckpt.history.is_empty() {
        write_csv(
            &args.out.join("mse_curves.csv"),
            "epoch,train_mse,test_mse",
            ckpt.history
                .iter()
                .map(|e| format!("{},{},{}", e.epoch, e.train_mse, e.test_mse)),
        )?;
    }

    let report = EvalReport {
        arch: ckpt.arch.clone(),
        split: args.split.label(),
        scores,
        network_mse,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(args.out.join("report.json"), text)?;

    println!(
        "{} on {} split: linear {:.2} dB, total {:.2} dB (skipped {} warm-up samples)",
        ckpt.arch,
        args.split.label(),
        scores.linear_only_db,
        scores.total_db,
        scores.skipped
    );
    if let Some(m) = network_mse {
        println!("network-stage loss on this segment: {m:.6e}");
    }
    println!("reports written to {}", args.out.display());
    Ok(())
}
