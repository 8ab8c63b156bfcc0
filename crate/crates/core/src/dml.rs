//! Decoupled margin loss over class prototypes.
//!
//! Two terms, evaluated on L2-normalized features `z` and unit-norm
//! prototypes `p` (prototypes are constants: no gradient flows into them):
//!
//! - pull: temperature-scaled cross-entropy of `z_i` against the live
//!   prototypes of the current task,
//!     mean_i -log( exp(z_i . p_{y_i} / tau) / sum_{c in live} exp(z_i . p_c / tau) )
//! - push: a hinge on similarity to every frozen past prototype,
//!     mean over all (i, j in past) pairs of max(0, z_i . p_j - margin).
//!
//! With no frozen prototypes the push term is exactly zero, and similarities
//! at or below the margin contribute exactly zero loss and gradient.
//!
//! Live prototypes follow an exponential moving average of their class's
//! normalized batch means and are renormalized after every update; at a task
//! boundary they freeze and join the past set. Past and live class ids stay
//! disjoint.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Row norms below this are treated as zero instead of being scaled up.
const NORM_GUARD: f64 = 1e-12;

/// Margin, temperature, and loss weight.
#[derive(Debug, Clone, Copy)]
pub struct DmlConfig {
    margin: f64,
    tau: f64,
    lambda: f64,
}

impl DmlConfig {
    pub fn new(margin: f64, tau: f64, lambda: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&margin) || !margin.is_finite() {
            return Err(Error::protocol(
                "DmlConfig::new",
                format!("margin {margin} outside [0, 1)"),
            ));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::protocol(
                "DmlConfig::new",
                format!("tau {tau} must be positive"),
            ));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::protocol(
                "DmlConfig::new",
                format!("lambda {lambda} must be nonnegative"),
            ));
        }
        Ok(DmlConfig { margin, tau, lambda })
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for DmlConfig {
    /// margin 0.3, tau 0.07, lambda 1.0.
    fn default() -> Self {
        DmlConfig {
            margin: 0.3,
            tau: 0.07,
            lambda: 1.0,
        }
    }
}

/// Normalized features with their labels; one sample per row.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    z: Matrix,
    labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(z: Matrix, labels: Vec<usize>) -> Result<Self> {
        if z.rows() != labels.len() {
            return Err(Error::shape(
                "FeatureBatch::new",
                format!("{} feature rows vs {} labels", z.rows(), labels.len()),
            ));
        }
        Ok(FeatureBatch { z, labels })
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Divides each row by `max(|row|_2, 1e-12)`; a zero row stays zero.
pub fn normalize_features(h: &Matrix) -> Matrix {
    let mut out = h.clone();
    for i in 0..h.rows() {
        let norm = dot(h.row(i), h.row(i)).sqrt();
        let denom = norm.max(NORM_GUARD);
        for j in 0..h.cols() {
            out.set(i, j, h.get(i, j) / denom);
        }
    }
    out
}

/// Unit-norm class prototypes: `live` for the current task (EMA-updated),
/// `past` frozen at earlier task boundaries. Key sets are disjoint.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    live: BTreeMap<usize, Vec<f64>>,
    past: BTreeMap<usize, Vec<f64>>,
    momentum: f64,
}

impl PrototypeBank {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::protocol(
                "PrototypeBank::new",
                format!("momentum {momentum} outside [0, 1]"),
            ));
        }
        Ok(PrototypeBank {
            live: BTreeMap::new(),
            past: BTreeMap::new(),
            momentum,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn live(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.live
    }

    pub fn past(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.past
    }

    pub fn has_past(&self) -> bool {
        !self.past.is_empty()
    }

    /// Prototype for `class`, live first, then frozen.
    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.live
            .get(&class)
            .or_else(|| self.past.get(&class))
            .map(Vec::as_slice)
    }

    /// Folds the rows of `class_features` (the current batch's samples of
    /// `class`) into the live prototype: first sighting adopts the
    /// normalized mean, later sightings blend with momentum and renormalize.
    /// Updating a frozen class is a protocol error.
    pub fn update_live(&mut self, class: usize, class_features: &Matrix) -> Result<()> {
        if self.past.contains_key(&class) {
            return Err(Error::protocol(
                "PrototypeBank::update_live",
                format!("class {class} is frozen; past prototypes never move"),
            ));
        }
        if class_features.rows() == 0 {
            return Err(Error::protocol(
                "PrototypeBank::update_live",
                format!("no feature rows supplied for class {class}"),
            ));
        }
        let d = class_features.cols();
        let mut mean = vec![0.0; d];
        for i in 0..class_features.rows() {
            for j in 0..d {
                mean[j] += class_features.get(i, j);
            }
        }
        let n = class_features.rows() as f64;
        for v in &mut mean {
            *v /= n;
        }
        let blended = match self.live.get(&class) {
            None => mean,
            Some(prev) => {
                if prev.len() != d {
                    return Err(Error::shape(
                        "PrototypeBank::update_live",
                        format!("feature dim {d} vs stored prototype dim {}", prev.len()),
                    ));
                }
                let m = self.momentum;
                prev.iter()
                    .zip(&mean)
                    .map(|(&p, &x)| m * p + (1.0 - m) * x)
                    .collect()
            }
        };
        let norm = dot(&blended, &blended).sqrt();
        if norm < NORM_GUARD {
            return Err(Error::numerical(
                "PrototypeBank::update_live",
                format!("prototype for class {class} collapsed to zero"),
            ));
        }
        self.live
            .insert(class, blended.into_iter().map(|v| v / norm).collect());
        Ok(())
    }

    /// Freezes every live prototype at a task boundary.
    pub fn freeze_task(&mut self) {
        let live = std::mem::take(&mut self.live);
        for (class, proto) in live {
            self.past.insert(class, proto);
        }
    }
}

/// Loss and feature gradient. Prototypes are constants; the returned matrix
/// is `dL/dZ` for the batch mean of both terms.
pub fn dml_loss(
    batch: &FeatureBatch,
    bank: &PrototypeBank,
    cfg: &DmlConfig,
) -> Result<(f64, Matrix)> {
    let n = batch.len();
    let d = batch.z().cols();
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, d)));
    }
    let live: Vec<(usize, &[f64])> = bank
        .live
        .iter()
        .map(|(&c, p)| (c, p.as_slice()))
        .collect();
    if live.is_empty() {
        return Err(Error::protocol(
            "dml_loss",
            "no live prototypes; the current task has not been sighted",
        ));
    }
    for p in bank.live.values().chain(bank.past.values()) {
        if p.len() != d {
            return Err(Error::shape(
                "dml_loss",
                format!("prototype dim {} vs feature dim {d}", p.len()),
            ));
        }
    }
    let past: Vec<&[f64]> = bank.past.values().map(Vec::as_slice).collect();

    let inv_n = 1.0 / n as f64;
    let mut pull_sum = 0.0;
    let mut push_sum = 0.0;
    let mut d_z = Matrix::zeros(n, d);

    for i in 0..n {
        let z = batch.z().row(i);
        let y = batch.labels()[i];
        let Some(own_pos) = live.iter().position(|&(c, _)| c == y) else {
            return Err(Error::protocol(
                "dml_loss",
                format!("label {y} has no live prototype"),
            ));
        };

        // Pull: softmax over live prototype similarities, stabilized by the
        // max logit.
        let logits: Vec<f64> = live.iter().map(|&(_, p)| dot(z, p) / cfg.tau).collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        pull_sum += max + sum_exp.ln() - logits[own_pos];
        for (idx, &(_, p)) in live.iter().enumerate() {
            let soft = (logits[idx] - max).exp() / sum_exp;
            let own = if idx == own_pos { 1.0 } else { 0.0 };
            let coef = inv_n * (soft - own) / cfg.tau;
            for j in 0..d {
                let cur = d_z.get(i, j);
                d_z.set(i, j, cur + coef * p[j]);
            }
        }

        // Push: hinge against every frozen prototype; only strictly active
        // pairs contribute, so an all-inactive batch is exactly zero.
        if !past.is_empty() {
            let pair_w = inv_n / past.len() as f64;
            for p in &past {
                let sim = dot(z, p);
                if sim > cfg.margin {
                    push_sum += sim - cfg.margin;
                    for j in 0..d {
                        let cur = d_z.get(i, j);
                        d_z.set(i, j, cur + pair_w * p[j]);
                    }
                }
            }
        }
    }

    let pull = pull_sum * inv_n;
    let push = if past.is_empty() {
        0.0
    } else {
        push_sum * inv_n / past.len() as f64
    };
    Ok((pull + push, d_z))
}
