//! Experiment harness: synthetic class-incremental streams, the integrated
//! training loop, ablation variants, forgetting metrics, and run diagnostics.

pub mod ablation;
pub mod data;
pub mod diagnostics;
pub mod metrics;
pub mod report;
pub mod train;

use crate::error::{Error, Result};

/// Which update-machinery pieces a run enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantFlags {
    /// Online subspace estimation feeding the protection basis.
    pub use_oe: bool,
    /// Two-stage gradient rectification of the projected gradient.
    pub use_gr: bool,
    /// Decoupled margin loss on normalized features.
    pub use_dml: bool,
}

impl VariantFlags {
    pub const NONE: VariantFlags = VariantFlags {
        use_oe: false,
        use_gr: false,
        use_dml: false,
    };

    /// The seven ablation rows, in canonical order.
    pub fn all_variants() -> [VariantFlags; 7] {
        [
            VariantFlags::NONE,
            VariantFlags { use_dml: true, ..VariantFlags::NONE },
            VariantFlags { use_oe: true, ..VariantFlags::NONE },
            VariantFlags { use_gr: true, ..VariantFlags::NONE },
            VariantFlags { use_oe: true, use_gr: true, use_dml: false },
            VariantFlags { use_oe: true, use_gr: false, use_dml: true },
            VariantFlags { use_oe: true, use_gr: true, use_dml: true },
        ]
    }

    pub fn name(&self) -> &'static str {
        match (self.use_oe, self.use_gr, self.use_dml) {
            (false, false, false) => "none",
            (false, false, true) => "dml",
            (true, false, false) => "oe",
            (false, true, false) => "gr",
            (true, true, false) => "oe+gr",
            (true, false, true) => "oe+dml",
            (true, true, true) => "full",
            (false, true, true) => "gr+dml",
        }
    }

    pub fn from_name(name: &str) -> Result<VariantFlags> {
        let flags = match name {
            "none" => VariantFlags::NONE,
            "dml" => VariantFlags { use_dml: true, ..VariantFlags::NONE },
            "oe" => VariantFlags { use_oe: true, ..VariantFlags::NONE },
            "gr" => VariantFlags { use_gr: true, ..VariantFlags::NONE },
            "oe+gr" => VariantFlags { use_oe: true, use_gr: true, use_dml: false },
            "oe+dml" => VariantFlags { use_oe: true, use_gr: false, use_dml: true },
            "gr+dml" => VariantFlags { use_oe: false, use_gr: true, use_dml: true },
            "full" => VariantFlags { use_oe: true, use_gr: true, use_dml: true },
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?}; expected one of none, dml, oe, gr, oe+gr, oe+dml, gr+dml, full"
                )))
            }
        };
        Ok(flags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Plain descent: increment = -eta * gradient.
    Sgd,
    /// Adaptive-moment descent with bias-corrected first and second moments.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub const ADAM_DEFAULT: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };

    /// Learning rate used when the config does not pin one explicitly.
    pub fn default_eta(&self) -> f64 {
        match self {
            OptimizerKind::Sgd => 1e-2,
            OptimizerKind::Adam { .. } => 1e-3,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Where the protection basis comes from, and whether protection runs at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// The full online machinery as configured by the variant flags.
    Janus,
    /// All machinery off regardless of flags: plain adapter fine-tuning.
    Finetune,
    /// Protection bases rebuilt at each task boundary by an offline
    /// eigendecomposition of stored activations instead of the online
    /// estimator. Deliberately not exemplar-free; the contrast baseline.
    OfflineSvdGpm,
}

impl Baseline {
    pub fn tag(&self) -> &'static str {
        match self {
            Baseline::Janus => "janus",
            Baseline::Finetune => "finetune",
            Baseline::OfflineSvdGpm => "offline-svd-gpm",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Baseline> {
        match tag {
            "janus" => Ok(Baseline::Janus),
            "finetune" => Ok(Baseline::Finetune),
            "offline-svd-gpm" => Ok(Baseline::OfflineSvdGpm),
            other => Err(Error::Config(format!(
                "unknown baseline {other:?}; expected janus, finetune, or offline-svd-gpm"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoraSettings {
    pub rank: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RectifySettings {
    pub delta: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OeSettings {
    /// Basis rank per layer.
    pub k: usize,
    /// Estimator step size.
    pub eta_v: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DmlSettings {
    pub margin: f64,
    pub tau: f64,
    pub lambda: f64,
    /// EMA momentum for live prototypes.
    pub momentum: f64,
}

/// Full description of one run. `Default` gives the desk-scale setup.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Cluster mean magnitude on the sphere.
    pub separation: f64,
    /// Isotropic per-coordinate noise standard deviation.
    pub noise: f64,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub lora: LoraSettings,
    pub rectify: RectifySettings,
    pub oe: OeSettings,
    pub dml: DmlSettings,
    pub variant: VariantFlags,
    pub baseline: Baseline,
    /// Violation-diagnostic cadence in optimizer steps (0 disables logging).
    pub log_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            n_tasks: 5,
            classes_per_task: 2,
            dim: 32,
            samples_per_class: 200,
            separation: 3.0,
            noise: 0.3,
            hidden: vec![32, 32],
            epochs: 5,
            batch_size: 32,
            optimizer: OptimizerKind::ADAM_DEFAULT,
            eta: 1e-3,
            lora: LoraSettings { rank: 4, scale: 1.0 },
            rectify: RectifySettings { delta: 1e-6 },
            oe: OeSettings { k: 8, eta_v: 1e-3 },
            dml: DmlSettings {
                margin: 0.3,
                tau: 0.07,
                lambda: 1.0,
                momentum: 0.9,
            },
            variant: VariantFlags { use_oe: true, use_gr: true, use_dml: true },
            baseline: Baseline::Janus,
            log_every: 1,
        }
    }
}

impl ExperimentConfig {
    /// Flags as actually applied: the fine-tune baseline forces everything
    /// off, the offline baseline needs projection enabled to protect at all.
    pub fn effective_variant(&self) -> VariantFlags {
        match self.baseline {
            Baseline::Finetune => VariantFlags::NONE,
            Baseline::Janus => self.variant,
            Baseline::OfflineSvdGpm => VariantFlags {
                use_oe: true,
                ..self.variant
            },
        }
    }

    pub fn total_classes(&self) -> usize {
        self.n_tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_tasks", self.n_tasks),
            ("classes_per_task", self.classes_per_task),
            ("dim", self.dim),
            ("samples_per_class", self.samples_per_class),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.samples_per_class < 5 {
            return Err(Error::Config(
                "samples_per_class must be at least 5 for an 80/20 split".into(),
            ));
        }
        let finite_nonneg = [
            ("separation", self.separation),
            ("noise", self.noise),
        ];
        for (name, v) in finite_nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(Error::Config("eta must be finite and positive".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, epsilon } = self.optimizer {
            for (name, v, hi) in [("beta1", beta1, 1.0), ("beta2", beta2, 1.0)] {
                if !v.is_finite() || !(0.0..hi).contains(&v) {
                    return Err(Error::Config(format!("{name} must lie in [0, 1)")));
                }
            }
            if !epsilon.is_finite() || epsilon <= 0.0 {
                return Err(Error::Config("epsilon must be finite and positive".into()));
            }
        }
        if self.lora.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if !self.lora.scale.is_finite() || self.lora.scale <= 0.0 {
            return Err(Error::Config("lora scale must be finite and positive".into()));
        }
        if !self.rectify.delta.is_finite() || self.rectify.delta <= 0.0 {
            return Err(Error::Config("rectify delta must be finite and positive".into()));
        }
        if self.oe.k == 0 {
            return Err(Error::Config("oe k must be positive".into()));
        }
        let min_width = self.hidden.iter().copied().min().unwrap_or(self.dim);
        if self.oe.k > min_width.min(self.dim) {
            return Err(Error::Config(format!(
                "oe k = {} exceeds the narrowest layer input width {}",
                self.oe.k,
                min_width.min(self.dim)
            )));
        }
        if !self.oe.eta_v.is_finite() || self.oe.eta_v <= 0.0 {
            return Err(Error::Config("oe eta_v must be finite and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dml.margin) {
            return Err(Error::Config("dml margin must lie in [0, 1)".into()));
        }
        if !self.dml.tau.is_finite() || self.dml.tau <= 0.0 {
            return Err(Error::Config("dml tau must be finite and positive".into()));
        }
        if !self.dml.lambda.is_finite() || self.dml.lambda < 0.0 {
            return Err(Error::Config("dml lambda must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dml.momentum) {
            return Err(Error::Config("dml momentum must lie in [0, 1]".into()));
        }
        for (l, &w) in self.hidden.iter().enumerate() {
            if w == 0 {
                return Err(Error::Config(format!("hidden layer {l} has width 0")));
            }
        }
        Ok(())
    }
}
