//! Flat `key = value` config files with one section per module. Unknown
//! sections and keys are hard errors so misspellings never silently fall
//! back to defaults; duplicate keys are rejected for the same reason.

use std::collections::BTreeSet;

use anyhow::{anyhow, bail, Result};
use janus_core::harness::{Baseline, ExperimentConfig, OptimizerKind, VariantFlags};

/// A parsed file plus which learning rate source applies: an explicit `eta`
/// wins; otherwise the optimizer's own default is resolved at the end.
#[derive(Debug, Clone)]
pub struct FileConfig {
    pub experiment: ExperimentConfig,
    pub eta_explicit: bool,
}

const SECTIONS: &[&str] = &[
    "run", "data", "model", "lora", "rectify", "oe", "dml", "variant",
];

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse::<T>()
        .map_err(|_| anyhow!("invalid value {raw:?} for key '{key}' in section [{section}]"))
}

fn parse_bool(section: &str, key: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => bail!("invalid value {other:?} for key '{key}' in section [{section}]; expected true or false"),
    }
}

/// Parses config text over the desk-scale defaults.
pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut eta_explicit = false;
    let mut optimizer_tag: Option<String> = None;
    let mut adam_beta1: Option<f64> = None;
    let mut adam_beta2: Option<f64> = None;
    let mut adam_epsilon: Option<f64> = None;
    let mut section = String::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();

    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| anyhow!("line {}: malformed section header {line:?}", lineno + 1))?
                .trim();
            if !SECTIONS.contains(&name) {
                bail!(
                    "unknown section [{name}] on line {}; expected one of {}",
                    lineno + 1,
                    SECTIONS.iter().map(|s| format!("[{s}]")).collect::<Vec<_>>().join(", ")
                );
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected 'key = value', got {line:?}", lineno + 1))?;
        let key = key.trim();
        let value = value.trim();
        if section.is_empty() {
            bail!("line {}: key '{key}' appears before any [section]", lineno + 1);
        }
        if !seen.insert((section.clone(), key.to_string())) {
            bail!("duplicate key '{key}' in section [{section}]");
        }
        match (section.as_str(), key) {
            ("run", "seed") => cfg.seed = parse_value(&section, key, value)?,
            ("run", "tasks") => cfg.n_tasks = parse_value(&section, key, value)?,
            ("run", "epochs") => cfg.epochs = parse_value(&section, key, value)?,
            ("run", "batch_size") => cfg.batch_size = parse_value(&section, key, value)?,
            ("run", "optimizer") => optimizer_tag = Some(value.to_string()),
            ("run", "eta") => {
                cfg.eta = parse_value(&section, key, value)?;
                eta_explicit = true;
            }
            ("run", "beta1") => adam_beta1 = Some(parse_value(&section, key, value)?),
            ("run", "beta2") => adam_beta2 = Some(parse_value(&section, key, value)?),
            ("run", "epsilon") => adam_epsilon = Some(parse_value(&section, key, value)?),
            ("run", "baseline") => {
                cfg.baseline = Baseline::from_tag(value).map_err(|e| anyhow!("{e}"))?
            }
            ("run", "log_every") => cfg.log_every = parse_value(&section, key, value)?,
            ("data", "classes_per_task") => {
                cfg.classes_per_task = parse_value(&section, key, value)?
            }
            ("data", "dim") => cfg.dim = parse_value(&section, key, value)?,
            ("data", "samples_per_class") => {
                cfg.samples_per_class = parse_value(&section, key, value)?
            }
            ("data", "separation") => cfg.separation = parse_value(&section, key, value)?,
            ("data", "noise") => cfg.noise = parse_value(&section, key, value)?,
            ("model", "hidden") => {
                let mut widths = Vec::new();
                for tok in value.split(',') {
                    widths.push(parse_value::<usize>(&section, key, tok)?);
                }
                cfg.hidden = widths;
            }
            ("lora", "rank") => cfg.lora.rank = parse_value(&section, key, value)?,
            ("lora", "scale") => cfg.lora.scale = parse_value(&section, key, value)?,
            ("rectify", "delta") => cfg.rectify.delta = parse_value(&section, key, value)?,
            ("oe", "k") => cfg.oe.k = parse_value(&section, key, value)?,
            ("oe", "eta_v") => cfg.oe.eta_v = parse_value(&section, key, value)?,
            ("dml", "margin") => cfg.dml.margin = parse_value(&section, key, value)?,
            ("dml", "tau") => cfg.dml.tau = parse_value(&section, key, value)?,
            ("dml", "lambda") => cfg.dml.lambda = parse_value(&section, key, value)?,
            ("dml", "momentum") => cfg.dml.momentum = parse_value(&section, key, value)?,
            ("variant", "use_oe") => cfg.variant.use_oe = parse_bool(&section, key, value)?,
            ("variant", "use_gr") => cfg.variant.use_gr = parse_bool(&section, key, value)?,
            ("variant", "use_dml") => cfg.variant.use_dml = parse_bool(&section, key, value)?,
            (s, k) => bail!("unknown key '{k}' in section [{s}]"),
        }
    }

    if let Some(tag) = optimizer_tag {
        cfg.optimizer = match tag.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => {
                let OptimizerKind::Adam {
                    beta1: db1,
                    beta2: db2,
                    epsilon: de,
                } = OptimizerKind::ADAM_DEFAULT
                else {
                    unreachable!()
                };
                OptimizerKind::Adam {
                    beta1: adam_beta1.unwrap_or(db1),
                    beta2: adam_beta2.unwrap_or(db2),
                    epsilon: adam_epsilon.unwrap_or(de),
                }
            }
            other => bail!("invalid value {other:?} for key 'optimizer' in section [run]; expected sgd or adam"),
        };
    } else if adam_beta1.is_some() || adam_beta2.is_some() || adam_epsilon.is_some() {
        bail!("beta1/beta2/epsilon are set but 'optimizer' is not 'adam'");
    }
    if !eta_explicit {
        cfg.eta = cfg.optimizer.default_eta();
    }
    Ok(FileConfig {
        experiment: cfg,
        eta_explicit,
    })
}

/// The fully resolved config, defaults included. Floats use the shortest
/// round-trip representation, so re-parsing the echo reproduces every value
/// exactly.
pub fn echo_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    out.push_str("# fully resolved configuration; rerunning from this file\n");
    out.push_str("# reproduces the run bit for bit\n");
    out.push_str("[run]\n");
    out.push_str(&format!("seed = {}\n", cfg.seed));
    out.push_str(&format!("tasks = {}\n", cfg.n_tasks));
    out.push_str(&format!("epochs = {}\n", cfg.epochs));
    out.push_str(&format!("batch_size = {}\n", cfg.batch_size));
    out.push_str(&format!("optimizer = {}\n", cfg.optimizer.tag()));
    if let OptimizerKind::Adam { beta1, beta2, epsilon } = cfg.optimizer {
        out.push_str(&format!("beta1 = {beta1:?}\n"));
        out.push_str(&format!("beta2 = {beta2:?}\n"));
        out.push_str(&format!("epsilon = {epsilon:?}\n"));
    }
    out.push_str(&format!("eta = {:?}\n", cfg.eta));
    out.push_str(&format!("baseline = {}\n", cfg.baseline.tag()));
    out.push_str(&format!("log_every = {}\n", cfg.log_every));
    out.push_str("\n[data]\n");
    out.push_str(&format!("classes_per_task = {}\n", cfg.classes_per_task));
    out.push_str(&format!("dim = {}\n", cfg.dim));
    out.push_str(&format!("samples_per_class = {}\n", cfg.samples_per_class));
    out.push_str(&format!("separation = {:?}\n", cfg.separation));
    out.push_str(&format!("noise = {:?}\n", cfg.noise));
    out.push_str("\n[model]\n");
    let widths: Vec<String> = cfg.hidden.iter().map(|w| w.to_string()).collect();
    out.push_str(&format!("hidden = {}\n", widths.join(",")));
    out.push_str("\n[lora]\n");
    out.push_str(&format!("rank = {}\n", cfg.lora.rank));
    out.push_str(&format!("scale = {:?}\n", cfg.lora.scale));
    out.push_str("\n[rectify]\n");
    out.push_str(&format!("delta = {:?}\n", cfg.rectify.delta));
    out.push_str("\n[oe]\n");
    out.push_str(&format!("k = {}\n", cfg.oe.k));
    out.push_str(&format!("eta_v = {:?}\n", cfg.oe.eta_v));
    out.push_str("\n[dml]\n");
    out.push_str(&format!("margin = {:?}\n", cfg.dml.margin));
    out.push_str(&format!("tau = {:?}\n", cfg.dml.tau));
    out.push_str(&format!("lambda = {:?}\n", cfg.dml.lambda));
    out.push_str(&format!("momentum = {:?}\n", cfg.dml.momentum));
    out.push_str("\n[variant]\n");
    out.push_str(&format!("use_oe = {}\n", cfg.variant.use_oe));
    out.push_str(&format!("use_gr = {}\n", cfg.variant.use_gr));
    out.push_str(&format!("use_dml = {}\n", cfg.variant.use_dml));
    out
}

/// Applies command-line overrides on top of a parsed config and resolves the
/// learning-rate default.
pub fn apply_overrides(
    file: FileConfig,
    seed: Option<u64>,
    variant: Option<&str>,
    optimizer: Option<&str>,
) -> Result<ExperimentConfig> {
    let mut cfg = file.experiment;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(name) = variant {
        cfg.variant = VariantFlags::from_name(name).map_err(|e| anyhow!("{e}"))?;
    }
    if let Some(tag) = optimizer {
        cfg.optimizer = match tag {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::ADAM_DEFAULT,
            other => bail!("unknown optimizer {other:?}; expected sgd or adam"),
        };
        if !file.eta_explicit {
            cfg.eta = cfg.optimizer.default_eta();
        }
    }
    cfg.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_an_empty_config() {
        let parsed = parse_config("").unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(parsed.experiment.n_tasks, d.n_tasks);
        assert_eq!(parsed.experiment.eta, d.eta);
        assert!(!parsed.eta_explicit);
    }

    #[test]
    fn unknown_key_and_section_name_the_offender() {
        let err = parse_config("[run]\nsede = 3\n").unwrap_err().to_string();
        assert!(err.contains("'sede'"), "{err}");
        assert!(err.contains("[run]"), "{err}");
        let err = parse_config("[runs]\nseed = 3\n").unwrap_err().to_string();
        assert!(err.contains("[runs]"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse_config("[run]\nseed = 1\nseed = 2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate key 'seed'"), "{err}");
    }

    #[test]
    fn echo_round_trips_every_value() {
        let text = "[run]\nseed = 9\noptimizer = adam\nbeta1 = 0.85\n[data]\nnoise = 0.45\n[model]\nhidden = 16,8\n[variant]\nuse_dml = false\n";
        let cfg = parse_config(text).unwrap().experiment;
        let echoed = echo_config(&cfg);
        let back = parse_config(&echoed).unwrap().experiment;
        assert_eq!(cfg.seed, back.seed);
        assert_eq!(cfg.eta.to_bits(), back.eta.to_bits());
        assert_eq!(cfg.noise.to_bits(), back.noise.to_bits());
        assert_eq!(cfg.hidden, back.hidden);
        assert_eq!(cfg.variant, back.variant);
        match (cfg.optimizer, back.optimizer) {
            (
                OptimizerKind::Adam { beta1: a, .. },
                OptimizerKind::Adam { beta1: b, .. },
            ) => assert_eq!(a.to_bits(), b.to_bits()),
            other => panic!("optimizer mismatch: {other:?}"),
        }
    }

    #[test]
    fn adam_swaps_in_its_own_default_eta() {
        let cfg = parse_config("[run]\noptimizer = adam\n").unwrap();
        assert_eq!(cfg.experiment.eta, 1e-3);
        let cfg = parse_config("[run]\noptimizer = adam\neta = 0.5\n").unwrap();
        assert_eq!(cfg.experiment.eta, 0.5);
        assert!(cfg.eta_explicit);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let file = parse_config("[run]\nseed = 1\n").unwrap();
        let cfg = apply_overrides(file, Some(7), Some("oe+gr"), Some("adam")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(cfg.variant.use_oe && cfg.variant.use_gr && !cfg.variant.use_dml);
        assert_eq!(cfg.eta, 1e-3);
        let file = parse_config("[oe]\nk = 500\n").unwrap();
        assert!(apply_overrides(file, None, None, None).is_err());
    }

    #[test]
    fn stray_moment_keys_without_adam_are_rejected() {
        let err = parse_config("[run]\nbeta1 = 0.5\n").unwrap_err().to_string();
        assert!(err.contains("beta1"), "{err}");
    }
}
