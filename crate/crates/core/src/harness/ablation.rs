//! The seven-variant ablation: every flag combination of interest, run over
//! a set of seeds, with per-variant metric means and standard deviations.

use crate::error::Result;
use crate::harness::metrics::{acc_final, bwt, maa};
use crate::harness::report::MetricsRow;
use crate::harness::train::run_experiment;
use crate::harness::{ExperimentConfig, VariantFlags};

/// Aggregates over seeds for one variant row.
#[derive(Debug, Clone)]
pub struct VariantStats {
    pub variant: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_maa: f64,
    pub std_maa: f64,
    pub mean_bwt: f64,
    pub std_bwt: f64,
    pub n: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Runs one (variant, seed) cell and reduces it to a metrics row.
pub fn run_cell(base: &ExperimentConfig, flags: VariantFlags, seed: u64) -> Result<MetricsRow> {
    let mut cfg = base.clone();
    cfg.variant = flags;
    cfg.seed = seed;
    let out = run_experiment(&cfg)?;
    let bwt_val = if cfg.n_tasks >= 2 {
        bwt(&out.accuracy)?
    } else {
        0.0
    };
    Ok(MetricsRow {
        variant: flags.name().to_string(),
        seed,
        acc: acc_final(&out.accuracy)?,
        maa: maa(&out.accuracy)?,
        bwt: bwt_val,
    })
}

/// All seven variants over the given seeds. Returns the flat per-run rows
/// (variant-major, seed-minor) and the per-variant aggregates.
pub fn run_ablation(
    base: &ExperimentConfig,
    seeds: &[u64],
) -> Result<(Vec<MetricsRow>, Vec<VariantStats>)> {
    let mut rows = Vec::with_capacity(7 * seeds.len());
    let mut stats = Vec::with_capacity(7);
    for flags in VariantFlags::all_variants() {
        let mut accs = Vec::with_capacity(seeds.len());
        let mut maas = Vec::with_capacity(seeds.len());
        let mut bwts = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let row = run_cell(base, flags, seed)?;
            accs.push(row.acc);
            maas.push(row.maa);
            bwts.push(row.bwt);
            rows.push(row);
        }
        let (mean_acc, std_acc) = mean_std(&accs);
        let (mean_maa, std_maa) = mean_std(&maas);
        let (mean_bwt, std_bwt) = mean_std(&bwts);
        stats.push(VariantStats {
            variant: flags.name().to_string(),
            mean_acc,
            std_acc,
            mean_maa,
            std_maa,
            mean_bwt,
            std_bwt,
            n: seeds.len(),
        });
    }
    Ok((rows, stats))
}
