//! `sic complexity` — closed-form cost tables for canceler architectures.

use std::path::PathBuf;

use sic_core::complexity::{complexity_of, percent_change, ComplexityReport};

use crate::{ensure_dir, resolve_arch, write_csv};

/// The architectures listed when no `--arch` is given: the full reference
/// comparison set, polynomial baseline first.
pub const REFERENCE_SET: [&str; 12] = [
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

/// Arguments for `sic complexity`.
#[derive(Debug, clap::Args)]
pub struct ComplexityArgs {
    /// Architecture to price: a preset name or a custom spec such as
    /// "hcrnn:l=2,r=8,nhr=6". Repeat the flag for several rows; defaults to
    /// the reference comparison set
    #[arg(long = "arch")]
    pub archs: Vec<String>,
    /// Baseline the reduction columns compare against
    #[arg(long, default_value = "poly_p5")]
    pub baseline: String,
    /// Directory for complexity.csv
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

struct Row {
    name: String,
    cost: ComplexityReport,
    d_params: Option<f64>,
    d_flops: Option<f64>,
    reference_db: Option<f64>,
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

/// Runs the verb.
pub fn run(args: &ComplexityArgs) -> anyhow::Result<()> {
    let names: Vec<String> = if args.archs.is_empty() {
        REFERENCE_SET.iter().map(|s| s.to_string()).collect()
    } else {
        args.archs.clone()
    };
    let baseline = complexity_of(&resolve_arch(&args.baseline)?.config)?;

    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let arch = resolve_arch(name)?;
        let cost = complexity_of(&arch.config)?;
        let is_baseline = *name == args.baseline;
        rows.push(Row {
            name: name.clone(),
            cost,
            d_params: (!is_baseline).then(|| percent_change(cost.params, baseline.params)),
            d_flops: (!is_baseline).then(|| percent_change(cost.flops, baseline.flops)),
            reference_db: arch.reference_db,
        });
    }

    println!(
        "{:<28} {:>8} {:>8} {:>10} {:>10} {:>8}",
        "architecture", "params", "flops", "d_params%", "d_flops%", "ref_db"
    );
    for r in &rows {
        println!(
            "{:<28} {:>8} {:>8} {:>10} {:>10} {:>8}",
            r.name,
            r.cost.params,
            r.cost.flops,
            if r.d_params.is_some() { pct(r.d_params) } else { "-".into() },
            if r.d_flops.is_some() { pct(r.d_flops) } else { "-".into() },
            r.reference_db
                .map(|v| format!("{v:.2}"))
                .unwrap_or_else(|| "-".into()),
        );
    }
    println!("baseline: {}", args.baseline);

    ensure_dir(&args.out)?;
    let csv_path = args.out.join("complexity.csv");
    write_csv(
        &csv_path,
        "arch,params,flops,delta_params_pct,delta_flops_pct,reference_db",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{}",
                crate::csv_field(&r.name),
                r.cost.params,
                r.cost.flops,
                pct(r.d_params),
                pct(r.d_flops),
                r.reference_db.map(|v| format!("{v:.2}")).unwrap_or_default()
            )
        }),
    )?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
