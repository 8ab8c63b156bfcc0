//! The integrated training loop: local task loss, margin loss at the feature
//! tap, gradient protection and rectification per adapted layer, online
//! basis estimation, prototype maintenance, and per-task evaluation.

use std::io::{BufRead, Write};

use crate::dml::{dml_loss, DmlConfig, FeatureBatch, PrototypeBank};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{cross_entropy, Activation, NetConfig, ToyNet};
use crate::rectify::{rectify, safe_project, violation, RectifyConfig};
use crate::rng::{derive_seed, seeded_rng, shuffle};
use crate::subspace::{offline_svd_basis, OnlineEstimator, ProtectionBasis};

use super::data::{synth_stream, AccessTracker, Task};
use super::diagnostics::{angular_diagnostics, AngularSummary, ViolationRow};
use super::metrics::AccuracyMatrix;
use super::{Baseline, ExperimentConfig, OptimizerKind};

use rand_chacha::ChaCha8Rng;

/// Seed-stream tags keeping model init and batch order independent of the
/// data stream.
const MODEL_STREAM: u64 = 0x0DE1;
const TRAIN_STREAM: u64 = 0x7121;

/// Per-task row caps for the offline-basis buffer and the diagnostics
/// reference buffer.
const GPM_ROWS_PER_TASK: usize = 256;
const REF_ROWS_PER_TASK: usize = 128;

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
    t: u64,
}

/// Per-slot optimizer: slot 2l holds layer l's A factor, slot 2l + 1 its B
/// factor, and the last slot the head. Adaptive moments are kept per slot;
/// head moments grow with zero rows when the head grows.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    eta: f64,
    slots: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, eta: f64, n_slots: usize) -> Self {
        Optimizer {
            kind,
            eta,
            slots: vec![None; n_slots],
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Drops all accumulated moments. Called at task boundaries: each task is
    /// a fresh training session, and stale momentum would otherwise steer
    /// updates back into directions the projection has just removed.
    pub fn reset(&mut self) {
        for slot in &mut self.slots {
            *slot = None;
        }
    }

    /// Increment to apply for gradient `g` in `slot`.
    pub fn increment(&mut self, slot: usize, g: &Matrix) -> Result<Matrix> {
        match self.kind {
            OptimizerKind::Sgd => Ok(g.scale(-self.eta)),
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let state = self.slots.get_mut(slot).ok_or_else(|| {
                    Error::protocol("Optimizer::increment", format!("slot {slot} out of range"))
                })?;
                let cur = state.get_or_insert_with(|| Moments {
                    m: Matrix::zeros(g.rows(), g.cols()),
                    v: Matrix::zeros(g.rows(), g.cols()),
                    t: 0,
                });
                if cur.m.rows() != g.rows() || cur.m.cols() != g.cols() {
                    // The head grew: preserve moments for existing rows.
                    let mut m = Matrix::zeros(g.rows(), g.cols());
                    let mut v = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..cur.m.rows().min(g.rows()) {
                        for j in 0..cur.m.cols().min(g.cols()) {
                            m.set(i, j, cur.m.get(i, j));
                            v.set(i, j, cur.v.get(i, j));
                        }
                    }
                    cur.m = m;
                    cur.v = v;
                }
                cur.t += 1;
                let bc1 = 1.0 - beta1.powi(cur.t as i32);
                let bc2 = 1.0 - beta2.powi(cur.t as i32);
                let mut inc = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        let gij = g.get(i, j);
                        let m = beta1 * cur.m.get(i, j) + (1.0 - beta1) * gij;
                        let v = beta2 * cur.v.get(i, j) + (1.0 - beta2) * gij * gij;
                        cur.m.set(i, j, m);
                        cur.v.set(i, j, v);
                        let m_hat = m / bc1;
                        let v_hat = v / bc2;
                        inc.set(i, j, -self.eta * m_hat / (v_hat.sqrt() + epsilon));
                    }
                }
                Ok(inc)
            }
        }
    }
}

/// All mutable state of one run.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub cfg: ExperimentConfig,
    pub net: ToyNet,
    pub estimators: Vec<OnlineEstimator>,
    pub bases: Vec<ProtectionBasis>,
    pub bank: PrototypeBank,
    pub tracker: AccessTracker,
    pub violation_rows: Vec<ViolationRow>,
    pub angular: Vec<AngularSummary>,
    optimizer: Optimizer,
    rect_cfg: RectifyConfig,
    dml_cfg: DmlConfig,
    rng_train: ChaCha8Rng,
    /// Per layer, per finished task: activation buffers for the offline
    /// baseline (harvested before the task is marked completed).
    gpm_acts: Vec<Vec<Matrix>>,
    /// Per layer: test-set activations of finished tasks; diagnostics only.
    ref_acts: Vec<Vec<Matrix>>,
    next_task: usize,
    step: u64,
}

fn layer_input_dims(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut dims = Vec::with_capacity(cfg.hidden.len());
    let mut d = cfg.dim;
    for &w in &cfg.hidden {
        dims.push(d);
        d = w;
    }
    dims
}

fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
    let cols = blocks.first().map(|b| b.cols()).unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        if b.cols() != cols {
            return Err(Error::shape(
                "vstack",
                format!("{} columns vs {cols}", b.cols()),
            ));
        }
        for i in 0..b.rows() {
            for j in 0..cols {
                out.set(at + i, j, b.get(i, j));
            }
        }
        at += b.rows();
    }
    Ok(out)
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > best {
            best = v;
            arg = j;
        }
    }
    arg
}

impl TrainerState {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let net_cfg = NetConfig {
            input_dim: cfg.dim,
            hidden: cfg.hidden.clone(),
            rank: cfg.lora.rank,
            scale: cfg.lora.scale,
            activation: Activation::Tanh,
        };
        let net = ToyNet::new(&net_cfg, derive_seed(cfg.seed, MODEL_STREAM))?;
        let dims = layer_input_dims(&cfg);
        let mut estimators = Vec::with_capacity(dims.len());
        let mut bases = Vec::with_capacity(dims.len());
        for (l, &d) in dims.iter().enumerate() {
            estimators.push(OnlineEstimator::new(d, cfg.oe.k, cfg.oe.eta_v, l)?);
            bases.push(ProtectionBasis::empty(d, l));
        }
        let n_slots = 2 * dims.len() + 1;
        Ok(TrainerState {
            net,
            estimators,
            bases,
            bank: PrototypeBank::new(cfg.dml.momentum)?,
            tracker: AccessTracker::new(cfg.n_tasks),
            violation_rows: Vec::new(),
            angular: Vec::new(),
            optimizer: Optimizer::new(cfg.optimizer, cfg.eta, n_slots),
            rect_cfg: RectifyConfig::new(cfg.rectify.delta)?,
            dml_cfg: DmlConfig::new(cfg.dml.margin, cfg.dml.tau, cfg.dml.lambda)?,
            rng_train: seeded_rng(derive_seed(cfg.seed, TRAIN_STREAM)),
            gpm_acts: vec![Vec::new(); dims.len()],
            ref_acts: vec![Vec::new(); dims.len()],
            next_task: 0,
            cfg,
            step: 0,
        })
    }

    pub fn next_task(&self) -> usize {
        self.next_task
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Runs all epochs of one task, then performs the boundary work:
    /// diagnostics, basis snapshot/rebuild, prototype freeze, completion.
    pub fn train_task(&mut self, task: &Task) -> Result<()> {
        if task.id() != self.next_task {
            return Err(Error::protocol(
                "train_task",
                format!("task {} arrived, expected task {}", task.id(), self.next_task),
            ));
        }
        let base = *task.class_ids().first().ok_or_else(|| {
            Error::protocol("train_task", "task owns no classes")
        })?;
        for (j, &c) in task.class_ids().iter().enumerate() {
            if c != base + j {
                return Err(Error::protocol(
                    "train_task",
                    format!("class ids {:?} are not a contiguous block", task.class_ids()),
                ));
            }
        }
        if base != self.net.n_classes() {
            return Err(Error::protocol(
                "train_task",
                format!(
                    "task classes start at {base} but the head has {} rows",
                    self.net.n_classes()
                ),
            ));
        }
        self.net.expand_head(task.class_ids().len())?;
        self.optimizer.reset();

        let (train_x, train_labels) = task.train_data(&mut self.tracker);
        let n = train_x.rows();
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..self.cfg.epochs {
            shuffle(&mut self.rng_train, &mut order);
            let mut start = 0;
            while start < n {
                let end = (start + self.cfg.batch_size).min(n);
                let idx = &order[start..end];
                let xb = train_x.select_rows(idx)?;
                let yb: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
                self.train_batch(task, &xb, &yb)?;
                start = end;
            }
        }
        self.finish_task(task)
    }

    fn train_batch(&mut self, task: &Task, xb: &Matrix, yb: &[usize]) -> Result<()> {
        let flags = self.cfg.effective_variant();
        let (logits, features, caches) = self.net.forward(xb)?;

        let mut classes: Vec<usize> = yb.to_vec();
        classes.sort_unstable();
        classes.dedup();
        // A class's prototype must exist before the margin loss can see it,
        // so a first sighting adopts the batch mean up front; the regular
        // blend below still runs afterwards.
        for &c in &classes {
            if self.bank.prototype(c).is_none() {
                let rows: Vec<usize> = yb
                    .iter()
                    .enumerate()
                    .filter(|&(_, &l)| l == c)
                    .map(|(i, _)| i)
                    .collect();
                self.bank.update_live(c, &features.select_rows(&rows)?)?;
            }
        }

        // Task loss is local to the current class block: logits of other
        // classes receive exactly zero task-loss gradient.
        let base = task.class_ids()[0];
        let width = task.class_ids().len();
        let local = Matrix::from_fn(logits.rows(), width, |i, j| logits.get(i, base + j))?;
        let local_labels: Vec<usize> = yb.iter().map(|&l| l - base).collect();
        let (_l_task, d_local) = cross_entropy(&local, &local_labels)?;
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        for i in 0..logits.rows() {
            for j in 0..width {
                dlogits.set(i, base + j, d_local.get(i, j));
            }
        }

        let dz_extra = if flags.use_dml {
            let batch = FeatureBatch::new(features.clone(), yb.to_vec())?;
            let (_l_dml, dz) = dml_loss(&batch, &self.bank, &self.dml_cfg)?;
            dz.scale(self.cfg.dml.lambda)
        } else {
            Matrix::zeros(features.rows(), features.cols())
        };

        let (g_w, g_head) = self.net.backward(&caches, &dlogits, &dz_extra)?;

        let log_now = flags.use_oe
            && self.cfg.log_every > 0
            && self.step % self.cfg.log_every as u64 == 0;
        if log_now {
            self.log_violations(&g_w)?;
        }

        let protect = flags.use_oe && task.id() > 0;
        let mut incs = Vec::with_capacity(g_w.len());
        for (l, g_raw) in g_w.iter().enumerate() {
            let adapter = self.net.adapter(l);
            let shielded = protect && self.bases[l].rank() > 0;
            let g = if shielded {
                safe_project(g_raw, &self.bases[l])?
            } else {
                g_raw.clone()
            };
            let (ga, gb) = if flags.use_gr {
                rectify(adapter, &g, &self.rect_cfg)?
            } else {
                let (ga, gb) = adapter.factor_grads(&g)?;
                if shielded {
                    // Factor-level fallback: re-project the input-side
                    // factor gradient onto the unprotected complement.
                    let v = self.bases[l].v();
                    let gav = ga.matmul(v)?;
                    (ga.sub(&gav.matmul(&v.transpose())?)?, gb)
                } else {
                    (ga, gb)
                }
            };
            let inc_a = self.optimizer.increment(2 * l, &ga)?;
            let inc_b = self.optimizer.increment(2 * l + 1, &gb)?;
            incs.push((inc_a, inc_b));
        }
        let head_slot = 2 * g_w.len();
        let inc_head = self.optimizer.increment(head_slot, &g_head)?;
        for (l, (inc_a, inc_b)) in incs.iter().enumerate() {
            self.net.apply_layer_update(l, inc_a, inc_b)?;
        }
        self.net.apply_head_update(&inc_head)?;

        if flags.use_oe && self.cfg.baseline != Baseline::OfflineSvdGpm {
            for (l, est) in self.estimators.iter_mut().enumerate() {
                est.step(caches.layer_input(l))?;
            }
        }

        for &c in &classes {
            let rows: Vec<usize> = yb
                .iter()
                .enumerate()
                .filter(|&(_, &l)| l == c)
                .map(|(i, _)| i)
                .collect();
            self.bank.update_live(c, &features.select_rows(&rows)?)?;
        }

        self.step += 1;
        Ok(())
    }

    /// What each update style would do at this step, measured against raw
    /// activations of finished tasks. Uses a plain-descent surrogate
    /// (increment = -eta * direction) regardless of the configured
    /// optimizer, so the three styles stay directly comparable.
    fn log_violations(&mut self, g_w: &[Matrix]) -> Result<()> {
        let eta = self.optimizer.eta();
        for (l, g_raw) in g_w.iter().enumerate() {
            if self.bases[l].rank() == 0 || self.ref_acts[l].is_empty() {
                continue;
            }
            let adapter = self.net.adapter(l);
            let x_ref = vstack(&self.ref_acts[l])?;
            let (na, nb) = adapter.factor_grads(g_raw)?;
            let dw_naive = adapter.composite_update(&na.scale(-eta), &nb.scale(-eta))?;
            let g_safe = safe_project(g_raw, &self.bases[l])?;
            let dw_safe = g_safe.scale(-eta);
            let (ra, rb) = rectify(adapter, &g_safe, &self.rect_cfg)?;
            let dw_rect = adapter.composite_update(&ra.scale(-eta), &rb.scale(-eta))?;
            let exactness = g_safe.matmul(self.bases[l].v())?.frobenius_norm()
                / g_raw.frobenius_norm().max(1.0);
            self.violation_rows.push(ViolationRow {
                step: self.step,
                layer: l,
                naive: violation(&dw_naive, &x_ref)?,
                safe: violation(&dw_safe, &x_ref)?,
                rectified: violation(&dw_rect, &x_ref)?,
                safe_exactness: exactness,
            });
        }
        Ok(())
    }

    fn finish_task(&mut self, task: &Task) -> Result<()> {
        // The offline baseline banks this task's activations now, while the
        // task is still open; it deliberately retains data the online path
        // never keeps.
        if self.cfg.baseline == Baseline::OfflineSvdGpm {
            let (train_x, _) = task.train_data(&mut self.tracker);
            let cap = GPM_ROWS_PER_TASK.min(train_x.rows());
            let idx: Vec<usize> = (0..cap).collect();
            let xb = train_x.select_rows(&idx)?;
            let (_, _, caches) = self.net.forward(&xb)?;
            for (l, bank) in self.gpm_acts.iter_mut().enumerate() {
                bank.push(caches.layer_input(l).clone());
            }
        }

        // Reference activations for the violation diagnostics: test-side
        // data only, never visible to training.
        let cap = REF_ROWS_PER_TASK.min(task.test_x().rows());
        let idx: Vec<usize> = (0..cap).collect();
        let xb = task.test_x().select_rows(&idx)?;
        let (_, _, caches) = self.net.forward(&xb)?;
        for (l, bank) in self.ref_acts.iter_mut().enumerate() {
            bank.push(caches.layer_input(l).clone());
        }

        // Drift angles against tasks finished before this one, so the
        // current task's prototypes must still be live here.
        if task.id() > 0 && self.bank.has_past() {
            let (_, feats, _) = self.net.forward(task.test_x())?;
            let summary = angular_diagnostics(&feats, task.test_labels(), &self.bank, task.id())?;
            self.angular.push(summary);
        }

        match self.cfg.baseline {
            Baseline::OfflineSvdGpm => {
                for l in 0..self.bases.len() {
                    let stacked = vstack(&self.gpm_acts[l])?;
                    let v = offline_svd_basis(&stacked, self.cfg.oe.k)?;
                    self.bases[l] = ProtectionBasis::from_matrix(v, task.id(), l)?;
                }
            }
            _ => {
                for l in 0..self.bases.len() {
                    self.bases[l] = self.estimators[l].snapshot(task.id());
                }
            }
        }

        self.bank.freeze_task();
        self.tracker.mark_completed(task.id());
        self.next_task += 1;
        Ok(())
    }

    /// Accuracy on each given task's test set, argmax over every class the
    /// head currently knows (ties resolve to the lowest class id).
    pub fn evaluate(&self, tasks: &[Task]) -> Result<Vec<f64>> {
        evaluate_net(&self.net, tasks)
    }

    /// Serializes everything diagnostics need: network, prototypes, bases.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let io_err = |e: std::io::Error| Error::io("TrainerState::write_checkpoint", e.to_string());
        writeln!(w, "janus-state v1").map_err(io_err)?;
        self.net.write_checkpoint(w)?;
        let live = self.bank.live();
        let past = self.bank.past();
        writeln!(w, "prototypes {} dim {}", live.len() + past.len(), self.net.feature_dim())
            .map_err(io_err)?;
        for (&c, p) in past {
            let row: Vec<String> = p.iter().map(|&v| crate::model::hex_f64(v)).collect();
            writeln!(w, "{c} past {}", row.join(" ")).map_err(io_err)?;
        }
        for (&c, p) in live {
            let row: Vec<String> = p.iter().map(|&v| crate::model::hex_f64(v)).collect();
            writeln!(w, "{c} live {}", row.join(" ")).map_err(io_err)?;
        }
        writeln!(w, "bases {}", self.bases.len()).map_err(io_err)?;
        for basis in &self.bases {
            writeln!(w, "basis {} source {}", basis.layer_id(), basis.source_task())
                .map_err(io_err)?;
            crate::model::write_matrix(w, "v", basis.v()).map_err(io_err)?;
        }
        writeln!(w, "end janus-state").map_err(io_err)?;
        Ok(())
    }
}

/// The trained artifacts a diagnostics pass needs, as restored from a
/// checkpoint.
#[derive(Debug)]
pub struct DiagnosticCheckpoint {
    pub net: ToyNet,
    /// class id -> (was_live, unit prototype).
    pub prototypes: Vec<(usize, bool, Vec<f64>)>,
    pub bases: Vec<ProtectionBasis>,
}

impl DiagnosticCheckpoint {
    pub fn read(r: &mut impl BufRead) -> Result<Self> {
        let mut lines = crate::model::CheckpointLines::new(r);
        let header = lines.next_line()?;
        if header.trim() != "janus-state v1" {
            return Err(Error::io(
                "DiagnosticCheckpoint::read",
                format!("bad header {header:?}"),
            ));
        }
        // The network block is self-delimiting: collect it verbatim through
        // its trailer, then hand it to the network parser.
        let net = {
            let mut block = String::new();
            loop {
                let line = lines.next_line()?;
                let done = line.trim() == "end toynet";
                block.push_str(&line);
                block.push('\n');
                if done {
                    break;
                }
            }
            ToyNet::read_checkpoint(&mut block.as_bytes())?
        };
        let meta = lines.next_line()?;
        let mut parts = meta.split_whitespace();
        if parts.next() != Some("prototypes") {
            return Err(Error::io(
                "DiagnosticCheckpoint::read",
                format!("expected prototypes header, got {meta:?}"),
            ));
        }
        let count: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::io("DiagnosticCheckpoint::read", "bad prototype count"))?;
        let mut prototypes = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next_line()?;
            let mut toks = line.split_whitespace();
            let class: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::io("DiagnosticCheckpoint::read", "bad prototype class"))?;
            let live = match toks.next() {
                Some("live") => true,
                Some("past") => false,
                other => {
                    return Err(Error::io(
                        "DiagnosticCheckpoint::read",
                        format!("bad prototype state {other:?}"),
                    ))
                }
            };
            let mut p = Vec::new();
            for t in toks {
                p.push(crate::model::unhex_f64(t)?);
            }
            prototypes.push((class, live, p));
        }
        let bases_meta = lines.next_line()?;
        let mut parts = bases_meta.split_whitespace();
        if parts.next() != Some("bases") {
            return Err(Error::io(
                "DiagnosticCheckpoint::read",
                format!("expected bases header, got {bases_meta:?}"),
            ));
        }
        let n_bases: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::io("DiagnosticCheckpoint::read", "bad basis count"))?;
        let mut bases = Vec::with_capacity(n_bases);
        for _ in 0..n_bases {
            let line = lines.next_line()?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some("basis") {
                return Err(Error::io(
                    "DiagnosticCheckpoint::read",
                    format!("expected basis header, got {line:?}"),
                ));
            }
            let layer: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::io("DiagnosticCheckpoint::read", "bad basis layer"))?;
            let source: usize = match (toks.next(), toks.next()) {
                (Some("source"), Some(t)) => t
                    .parse()
                    .map_err(|_| Error::io("DiagnosticCheckpoint::read", "bad basis source"))?,
                _ => {
                    return Err(Error::io(
                        "DiagnosticCheckpoint::read",
                        "missing basis source",
                    ))
                }
            };
            let v = crate::model::read_matrix(&mut lines, "v")?;
            let basis = if v.cols() == 0 {
                ProtectionBasis::empty(v.rows(), layer)
            } else {
                ProtectionBasis::from_matrix(v, source, layer)?
            };
            bases.push(basis);
        }
        let trailer = lines.next_line()?;
        if trailer.trim() != "end janus-state" {
            return Err(Error::io(
                "DiagnosticCheckpoint::read",
                format!("bad trailer {trailer:?}"),
            ));
        }
        Ok(DiagnosticCheckpoint {
            net,
            prototypes,
            bases,
        })
    }
}

/// Accuracy of `net` on each task's test set, argmax over all classes the
/// head knows; ties resolve to the lowest class id.
pub fn evaluate_net(net: &ToyNet, tasks: &[Task]) -> Result<Vec<f64>> {
    if net.n_classes() == 0 {
        return Err(Error::protocol("evaluate", "head has no classes yet"));
    }
    let mut row = Vec::with_capacity(tasks.len());
    for task in tasks {
        let (logits, _, _) = net.forward(task.test_x())?;
        let labels = task.test_labels();
        let mut correct = 0usize;
        for i in 0..logits.rows() {
            if argmax_row(logits.row(i)) == labels[i] {
                correct += 1;
            }
        }
        row.push(correct as f64 / logits.rows().max(1) as f64);
    }
    Ok(row)
}

/// A finished run: the accuracy matrix plus all state and diagnostics.
#[derive(Debug)]
pub struct RunOutput {
    pub accuracy: AccuracyMatrix,
    pub state: TrainerState,
}

/// Builds the stream, trains every task in order, and evaluates after each.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let tasks = synth_stream(cfg)?;
    let mut state = TrainerState::new(cfg.clone())?;
    let mut accuracy = AccuracyMatrix::new();
    for t in 0..tasks.len() {
        state.train_task(&tasks[t])?;
        let row = state.evaluate(&tasks[..=t])?;
        accuracy.push_row(row)?;
    }
    Ok(RunOutput { accuracy, state })
}
