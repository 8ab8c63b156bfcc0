//! `janus`: run continual-learning experiments, ablations, seed sweeps, and
//! post-hoc diagnostics, or verify the analytic routes against built-in
//! oracles. Every run writes its fully resolved config next to its outputs.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use janus_core::dml::PrototypeBank;
use janus_core::harness::ablation::{run_ablation, VariantStats};
use janus_core::harness::data::synth_stream;
use janus_core::harness::diagnostics::angular_diagnostics;
use janus_core::harness::metrics::{acc_final, bwt, maa};
use janus_core::harness::report::{
    accuracy_csv, angular_csv, fmt_sig10, metrics_csv, violation_csv, MetricsRow,
};
use janus_core::harness::train::{evaluate_net, run_experiment, DiagnosticCheckpoint, RunOutput};
use janus_core::harness::ExperimentConfig;
use janus_core::selftest::run_selftest;
use janus_core::Matrix;

use config::{apply_overrides, echo_config, parse_config, FileConfig};

/// Environment override for the root of relative output paths.
const OUT_ROOT_ENV: &str = "JANUS_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "janus",
    version,
    about = "Continual-learning workbench: protected low-rank updates, ablations, diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one experiment and write its reports
    Run {
        /// Config file; defaults apply where absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (relative paths live under JANUS_OUT_ROOT if set)
        #[arg(long, default_value = "janus-run")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Variant name: none|dml|oe|gr|oe+gr|oe+dml|gr+dml|full
        #[arg(long)]
        variant: Option<String>,
        /// sgd or adam
        #[arg(long)]
        optimizer: Option<String>,
    },
    /// Run all seven flag variants over a set of seeds
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "janus-ablation")]
        out: PathBuf,
        /// Base seed; consecutive seeds count up from it
        #[arg(long)]
        seed: Option<u64>,
        /// Number of seeds per variant
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        optimizer: Option<String>,
    },
    /// Run one variant over several seeds, one run directory each
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "janus-sweep")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        optimizer: Option<String>,
    },
    /// Recompute diagnostics from a finished run directory
    Diagnose {
        /// Directory holding config.echo.ini and checkpoint.txt
        #[arg(long)]
        run: PathBuf,
    },
    /// Check every analytic route against its independent oracle
    Selftest,
}

fn main() {
    if let Err(e) = dispatch() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch() -> Result<()> {
    match Cli::parse().command {
        Cmd::Run {
            config,
            out,
            seed,
            variant,
            optimizer,
        } => {
            let cfg = resolve_config(config.as_deref(), seed, variant.as_deref(), optimizer.as_deref())?;
            let out_dir = resolve_out(&out);
            let run = run_experiment(&cfg)?;
            write_run_outputs(&out_dir, &cfg, &run)?;
            print_run_summary(&cfg, &run)?;
            println!("outputs: {}", out_dir.display());
            Ok(())
        }
        Cmd::Ablate {
            config,
            out,
            seed,
            seeds,
            optimizer,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let base = resolve_config(config.as_deref(), seed, None, optimizer.as_deref())?;
            let out_dir = resolve_out(&out);
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
            let (rows, stats) = run_ablation(&base, &seed_list)?;
            fs::write(out_dir.join("config.echo.ini"), echo_config(&base))?;
            fs::write(out_dir.join("metrics.csv"), metrics_csv(&rows))?;
            print_ablation_table(&stats);
            println!(
                "{} variants x {} seeds = {} rows -> {}",
                stats.len(),
                seed_list.len(),
                rows.len(),
                out_dir.join("metrics.csv").display()
            );
            Ok(())
        }
        Cmd::Sweep {
            config,
            out,
            seed,
            seeds,
            variant,
            optimizer,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let base = resolve_config(config.as_deref(), seed, variant.as_deref(), optimizer.as_deref())?;
            let out_dir = resolve_out(&out);
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let mut rows = Vec::with_capacity(seeds as usize);
            for i in 0..seeds {
                let mut cfg = base.clone();
                cfg.seed = base.seed + i;
                let run = run_experiment(&cfg)?;
                let sub = out_dir.join(format!("seed-{}", cfg.seed));
                write_run_outputs(&sub, &cfg, &run)?;
                rows.push(metrics_row(&cfg, &run)?);
                println!(
                    "seed {}: acc {} bwt {}",
                    cfg.seed,
                    fmt_sig10(rows.last().unwrap().acc),
                    fmt_sig10(rows.last().unwrap().bwt)
                );
            }
            fs::write(out_dir.join("metrics.csv"), metrics_csv(&rows))?;
            let accs: Vec<f64> = rows.iter().map(|r| r.acc).collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            println!("mean final accuracy over {} seeds: {}", seeds, fmt_sig10(mean));
            println!("outputs: {}", out_dir.display());
            Ok(())
        }
        Cmd::Diagnose { run } => diagnose(&run),
        Cmd::Selftest => {
            let results = run_selftest();
            let mut all_ok = true;
            for r in &results {
                println!(
                    "{} {} ({})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                all_ok &= r.passed;
            }
            if !all_ok {
                bail!("selftest failed");
            }
            println!("all {} checks passed", results.len());
            Ok(())
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => parse_config(""),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            parse_config(&text).with_context(|| format!("in config {}", p.display()))
        }
    }
}

fn resolve_config(
    path: Option<&Path>,
    seed: Option<u64>,
    variant: Option<&str>,
    optimizer: Option<&str>,
) -> Result<ExperimentConfig> {
    let file = load_file_config(path)?;
    apply_overrides(file, seed, variant, optimizer)
}

fn resolve_out(out: &Path) -> PathBuf {
    if out.is_absolute() {
        return out.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(out),
        None => out.to_path_buf(),
    }
}

fn metrics_row(cfg: &ExperimentConfig, run: &RunOutput) -> Result<MetricsRow> {
    Ok(MetricsRow {
        variant: cfg.effective_variant().name().to_string(),
        seed: cfg.seed,
        acc: acc_final(&run.accuracy)?,
        maa: maa(&run.accuracy)?,
        bwt: if cfg.n_tasks >= 2 {
            bwt(&run.accuracy)?
        } else {
            0.0
        },
    })
}

fn write_run_outputs(dir: &Path, cfg: &ExperimentConfig, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.echo.ini"), echo_config(cfg))?;
    fs::write(dir.join("accuracy.csv"), accuracy_csv(&run.accuracy)?)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&[metrics_row(cfg, run)?]))?;
    fs::write(
        dir.join("violation.csv"),
        violation_csv(&run.state.violation_rows),
    )?;
    fs::write(dir.join("angular.csv"), angular_csv(&run.state.angular))?;
    let mut ckpt = Vec::new();
    run.state.write_checkpoint(&mut ckpt)?;
    fs::write(dir.join("checkpoint.txt"), ckpt)?;
    Ok(())
}

fn print_run_summary(cfg: &ExperimentConfig, run: &RunOutput) -> Result<()> {
    let row = metrics_row(cfg, run)?;
    println!(
        "variant {} seed {}: ACC {} MAA {} BWT {}",
        row.variant,
        row.seed,
        fmt_sig10(row.acc),
        fmt_sig10(row.maa),
        fmt_sig10(row.bwt)
    );
    for s in &run.state.angular {
        println!(
            "task {}: danger fraction {}",
            s.task + 1,
            fmt_sig10(s.danger_fraction)
        );
    }
    println!(
        "training reads of finished tasks: {}",
        run.state.tracker.violations()
    );
    Ok(())
}

fn print_ablation_table(stats: &[VariantStats]) {
    println!("{:<8} {:>18} {:>18} {:>19}", "variant", "acc (mean+-std)", "maa (mean+-std)", "bwt (mean+-std)");
    for s in stats {
        println!(
            "{:<8} {:>8.4} +- {:<6.4} {:>8.4} +- {:<6.4} {:>9.4} +- {:<6.4}",
            s.variant, s.mean_acc, s.std_acc, s.mean_maa, s.std_maa, s.mean_bwt, s.std_bwt
        );
    }
}

/// Rebuilds a prototype bank as it stood while `task` was live: earlier
/// classes frozen, the task's own classes live.
fn bank_for_task(
    prototypes: &[(usize, bool, Vec<f64>)],
    task: usize,
    classes_per_task: usize,
    momentum: f64,
) -> Result<PrototypeBank> {
    let base = task * classes_per_task;
    let mut bank = PrototypeBank::new(momentum)?;
    for (c, _, p) in prototypes.iter().filter(|(c, _, _)| *c < base) {
        bank.update_live(*c, &Matrix::from_rows(&[p.clone()])?)?;
    }
    bank.freeze_task();
    for (c, _, p) in prototypes
        .iter()
        .filter(|(c, _, _)| *c >= base && *c < base + classes_per_task)
    {
        bank.update_live(*c, &Matrix::from_rows(&[p.clone()])?)?;
    }
    Ok(bank)
}

fn diagnose(run_dir: &Path) -> Result<()> {
    let cfg_path = run_dir.join("config.echo.ini");
    let cfg_text = fs::read_to_string(&cfg_path)
        .with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg = apply_overrides(parse_config(&cfg_text)?, None, None, None)?;
    let ckpt_path = run_dir.join("checkpoint.txt");
    let ckpt = fs::read(&ckpt_path)
        .with_context(|| format!("reading {}", ckpt_path.display()))?;
    let restored = DiagnosticCheckpoint::read(&mut ckpt.as_slice())?;

    let tasks = synth_stream(&cfg)?;
    let final_row = evaluate_net(&restored.net, &tasks)?;
    println!("accuracy per task from the checkpoint:");
    for (i, acc) in final_row.iter().enumerate() {
        println!("  task {}: {}", i + 1, fmt_sig10(*acc));
    }

    let mut summaries = Vec::new();
    for task in tasks.iter().skip(1) {
        let bank = bank_for_task(
            &restored.prototypes,
            task.id(),
            cfg.classes_per_task,
            cfg.dml.momentum,
        )?;
        let (_, feats, _) = restored.net.forward(task.test_x())?;
        let summary = angular_diagnostics(&feats, task.test_labels(), &bank, task.id())
            .map_err(|e| anyhow!("task {}: {e}", task.id() + 1))?;
        println!(
            "task {}: danger fraction {}",
            task.id() + 1,
            fmt_sig10(summary.danger_fraction)
        );
        summaries.push(summary);
    }
    let out_dir = run_dir.join("diagnosis");
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("angular.csv"), angular_csv(&summaries))?;
    println!("diagnosis written to {}", out_dir.display());
    Ok(())
}
