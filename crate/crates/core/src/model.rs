//! Small adapted network with an exact manual backward pass.
//!
//! Architecture: a frozen Gaussian backbone of hidden linear layers, each
//! wrapped in a low-rank adapter and followed by tanh; features are the
//! L2-normalized output of the last hidden layer; logits are `Z * head^T`
//! against a classification head that starts empty and grows by zero rows as
//! classes arrive. The head trains directly (its gradient bypasses subspace
//! protection); the backbone only ever moves through adapter factors.
//!
//! `forward` captures every intermediate needed by `backward`; caches carry
//! the parameter version at capture time, and using them after any parameter
//! mutation is a protocol error.

use std::io::{BufRead, Write};

use crate::dml::normalize_features;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::lora::LoraAdapter;
use crate::rng::{derive_seed, gaussian_matrix, seeded_rng};

/// Guard used when a feature row's norm underflows; matches the
/// normalization in [`crate::dml::normalize_features`].
const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Pass-through; used by tests that need a purely linear layer.
    Linear,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output `h`.
    fn derivative_from_output(&self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Linear => 1.0,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::io(
                "checkpoint",
                format!("unknown activation tag {other:?}"),
            )),
        }
    }
}

/// Shape and init parameters for [`ToyNet::new`].
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Hidden layer widths, in order. May be empty (head-only net).
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub scale: f64,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
struct Layer {
    adapter: LoraAdapter,
    activation: Activation,
}

/// Frozen-backbone network with low-rank adapters and a growing head.
#[derive(Debug, Clone)]
pub struct ToyNet {
    layers: Vec<Layer>,
    head: Matrix,
    feature_dim: usize,
    input_dim: usize,
    /// Bumped on every parameter mutation; invalidates outstanding caches.
    version: u64,
}

/// Intermediates captured by [`ToyNet::forward`] for one batch.
#[derive(Debug, Clone)]
pub struct ForwardCaches {
    version: u64,
    /// Input to each layer (layer 0 sees the batch itself).
    layer_inputs: Vec<Matrix>,
    /// Post-activation output of each layer.
    layer_outputs: Vec<Matrix>,
    /// Effective weight of each layer at capture time.
    eff_weights: Vec<Matrix>,
    /// Pre-normalization feature norms, one per row.
    norms: Vec<f64>,
    features: Matrix,
}

impl ForwardCaches {
    /// Input rows as seen by layer `l`; the batch itself for `l = 0`.
    pub fn layer_input(&self, l: usize) -> &Matrix {
        &self.layer_inputs[l]
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }
}

/// Task and margin losses with their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub l_task: f64,
    pub l_dml: f64,
    pub l_total: f64,
    pub lambda_dml: f64,
}

/// `l_total = l_task + lambda * l_dml`.
pub fn total_loss(l_task: f64, l_dml: f64, lambda: f64) -> LossBundle {
    LossBundle {
        l_task,
        l_dml,
        l_total: l_task + lambda * l_dml,
        lambda_dml: lambda,
    }
}

/// Mean cross-entropy over rows with max-subtraction stabilization.
/// Returns the loss and `dL/dlogits = (softmax - onehot) / N`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    let c = logits.cols();
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} logit rows vs {} labels", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::protocol("cross_entropy", "empty batch"));
    }
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(n, c);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let y = labels[i];
        if y >= c {
            return Err(Error::protocol(
                "cross_entropy",
                format!("label {y} out of range for {c} classes"),
            ));
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss += max + sum_exp.ln() - row[y];
        for j in 0..c {
            let soft = (row[j] - max).exp() / sum_exp;
            let own = if j == y { 1.0 } else { 0.0 };
            dlogits.set(i, j, (soft - own) * inv_n);
        }
    }
    Ok((loss * inv_n, dlogits))
}

impl ToyNet {
    /// Backbone weights are iid N(0, 1/fan_in) (std `1/sqrt(fan_in)`) drawn
    /// from per-layer sub-seeds of `seed`; adapters start as exact
    /// identities; the head starts with zero classes.
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 {
            return Err(Error::protocol("ToyNet::new", "input_dim must be positive"));
        }
        let mut layers = Vec::with_capacity(cfg.hidden.len());
        let mut fan_in = cfg.input_dim;
        for (l, &width) in cfg.hidden.iter().enumerate() {
            if width == 0 {
                return Err(Error::protocol(
                    "ToyNet::new",
                    format!("hidden layer {l} has width 0"),
                ));
            }
            let std = 1.0 / (fan_in as f64).sqrt();
            let mut rng = seeded_rng(derive_seed(seed, 0x1000 + l as u64));
            let w0 = gaussian_matrix(&mut rng, width, fan_in, std);
            let adapter =
                LoraAdapter::new(w0, cfg.rank, cfg.scale, derive_seed(seed, 0x2000 + l as u64))?;
            layers.push(Layer {
                adapter,
                activation: cfg.activation,
            });
            fan_in = width;
        }
        Ok(ToyNet {
            layers,
            head: Matrix::zeros(0, fan_in),
            feature_dim: fan_in,
            input_dim: cfg.input_dim,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_classes(&self) -> usize {
        self.head.rows()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn adapter(&self, l: usize) -> &LoraAdapter {
        &self.layers[l].adapter
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Appends `n_new` zero rows to the head. Existing rows keep their exact
    /// bits; asking for zero rows is a protocol error.
    pub fn expand_head(&mut self, n_new: usize) -> Result<()> {
        if n_new == 0 {
            return Err(Error::protocol("ToyNet::expand_head", "n_new must be >= 1"));
        }
        let old = self.head.rows();
        let mut grown = Matrix::zeros(old + n_new, self.feature_dim);
        for i in 0..old {
            for j in 0..self.feature_dim {
                grown.set(i, j, self.head.get(i, j));
            }
        }
        self.head = grown;
        self.version += 1;
        Ok(())
    }

    /// Full forward pass: logits, normalized features, and the caches needed
    /// by [`Self::backward`].
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix, ForwardCaches)> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(
                "ToyNet::forward",
                format!("input has {} columns, net expects {}", x.cols(), self.input_dim),
            ));
        }
        let n = x.rows();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut eff_weights = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let w = layer.adapter.effective_weight();
            let u = cur.matmul(&w.transpose())?;
            let mut h = u.clone();
            for i in 0..h.rows() {
                for j in 0..h.cols() {
                    h.set(i, j, layer.activation.apply(u.get(i, j)));
                }
            }
            layer_inputs.push(cur);
            eff_weights.push(w);
            layer_outputs.push(h.clone());
            cur = h;
        }
        let raw_features = cur;
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let r = raw_features.row(i);
            norms.push(dot(r, r).sqrt());
        }
        let features = normalize_features(&raw_features);
        let logits = features.matmul(&self.head.transpose())?;
        let caches = ForwardCaches {
            version: self.version,
            layer_inputs,
            layer_outputs,
            eff_weights,
            norms,
            features: features.clone(),
        };
        Ok((logits, features, caches))
    }

    /// Exact gradients for the batch that produced `caches`.
    ///
    /// `dlogits` is the task-loss gradient at the logits; `dz_extra` is an
    /// additional gradient injected at the normalized features (the margin
    /// loss taps in here). Returns per-layer effective-weight gradients and
    /// the head gradient.
    pub fn backward(
        &self,
        caches: &ForwardCaches,
        dlogits: &Matrix,
        dz_extra: &Matrix,
    ) -> Result<(Vec<Matrix>, Matrix)> {
        if caches.version != self.version {
            return Err(Error::protocol(
                "ToyNet::backward",
                format!(
                    "stale caches: captured at version {}, parameters now at {}",
                    caches.version, self.version
                ),
            ));
        }
        let n = caches.features.rows();
        let d_f = self.feature_dim;
        if dlogits.rows() != n || dlogits.cols() != self.head.rows() {
            return Err(Error::shape(
                "ToyNet::backward",
                format!(
                    "dlogits is {}x{}, expected {}x{}",
                    dlogits.rows(),
                    dlogits.cols(),
                    n,
                    self.head.rows()
                ),
            ));
        }
        if dz_extra.rows() != n || dz_extra.cols() != d_f {
            return Err(Error::shape(
                "ToyNet::backward",
                format!(
                    "dz_extra is {}x{}, expected {n}x{d_f}",
                    dz_extra.rows(),
                    dz_extra.cols()
                ),
            ));
        }

        let g_head = dlogits.transpose().matmul(&caches.features)?;
        let dz = dlogits.matmul(&self.head)?.add(dz_extra)?;

        // Through z = f / max(|f|, guard): for live norms the Jacobian is
        // (I - z z^T) / |f|; under the guard it is just 1/guard.
        let mut d_raw = Matrix::zeros(n, d_f);
        for i in 0..n {
            let norm = caches.norms[i];
            if norm > NORM_GUARD {
                let z = caches.features.row(i);
                let g = dz.row(i);
                let inner = dot(g, z);
                for j in 0..d_f {
                    d_raw.set(i, j, (g[j] - inner * z[j]) / norm);
                }
            } else {
                for j in 0..d_f {
                    d_raw.set(i, j, dz.get(i, j) / NORM_GUARD);
                }
            }
        }

        let mut g_w = vec![Matrix::zeros(0, 0); self.layers.len()];
        let mut d_h = d_raw;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let h = &caches.layer_outputs[l];
            let mut d_u = d_h.clone();
            for i in 0..d_u.rows() {
                for j in 0..d_u.cols() {
                    let slope = layer.activation.derivative_from_output(h.get(i, j));
                    d_u.set(i, j, d_h.get(i, j) * slope);
                }
            }
            g_w[l] = d_u.transpose().matmul(&caches.layer_inputs[l])?;
            if l > 0 {
                d_h = d_u.matmul(&caches.eff_weights[l])?;
            }
        }
        Ok((g_w, g_head))
    }

    /// Applies factor increments to one layer's adapter.
    pub fn apply_layer_update(&mut self, l: usize, d_a: &Matrix, d_b: &Matrix) -> Result<()> {
        if l >= self.layers.len() {
            return Err(Error::protocol(
                "ToyNet::apply_layer_update",
                format!("layer {l} out of range for {} layers", self.layers.len()),
            ));
        }
        self.layers[l].adapter.apply_factors(d_a, d_b)?;
        self.version += 1;
        Ok(())
    }

    /// Adds an increment to the head in place.
    pub fn apply_head_update(&mut self, d_head: &Matrix) -> Result<()> {
        self.head = self.head.add(d_head).map_err(|_| {
            Error::shape(
                "ToyNet::apply_head_update",
                format!(
                    "increment is {}x{}, head is {}x{}",
                    d_head.rows(),
                    d_head.cols(),
                    self.head.rows(),
                    self.head.cols()
                ),
            )
        })?;
        self.version += 1;
        Ok(())
    }

    /// Writes a versioned textual checkpoint. Floats are stored as raw bit
    /// patterns so a round trip is exact.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let io_err = |e: std::io::Error| Error::io("ToyNet::write_checkpoint", e.to_string());
        writeln!(w, "toynet v1").map_err(io_err)?;
        writeln!(
            w,
            "net layers {} input {} features {}",
            self.layers.len(),
            self.input_dim,
            self.feature_dim
        )
        .map_err(io_err)?;
        for (l, layer) in self.layers.iter().enumerate() {
            writeln!(
                w,
                "layer {l} act {} d_out {} d_in {} rank {} scale {}",
                layer.activation.tag(),
                layer.adapter.d_out(),
                layer.adapter.d_in(),
                layer.adapter.rank(),
                hex_f64(layer.adapter.scale()),
            )
            .map_err(io_err)?;
            write_matrix(w, "w0", layer.adapter.w0()).map_err(io_err)?;
            write_matrix(w, "a", layer.adapter.a()).map_err(io_err)?;
            write_matrix(w, "b", layer.adapter.b()).map_err(io_err)?;
        }
        write_matrix(w, "head", &self.head).map_err(io_err)?;
        writeln!(w, "end toynet").map_err(io_err)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Self::write_checkpoint`].
    pub fn read_checkpoint(r: &mut impl BufRead) -> Result<Self> {
        let mut lines = CheckpointLines::new(r);
        let header = lines.next_line()?;
        if header.trim() != "toynet v1" {
            return Err(Error::io(
                "ToyNet::read_checkpoint",
                format!("bad header {header:?}, expected \"toynet v1\""),
            ));
        }
        let meta = lines.next_line()?;
        let fields = parse_fields(&meta, &["net layers", "input", "features"])?;
        let n_layers = fields[0] as usize;
        let input_dim = fields[1] as usize;
        let feature_dim = fields[2] as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let line = lines.next_line()?;
            let mut parts = line.split_whitespace();
            let expect = |parts: &mut std::str::SplitWhitespace<'_>, tag: &str| -> Result<String> {
                let got = parts.next().unwrap_or_default();
                if got != tag {
                    return Err(Error::io(
                        "ToyNet::read_checkpoint",
                        format!("expected token {tag:?} in layer header, got {got:?}"),
                    ));
                }
                parts
                    .next()
                    .map(str::to_owned)
                    .ok_or_else(|| Error::io("ToyNet::read_checkpoint", "truncated layer header"))
            };
            let idx: usize = expect(&mut parts, "layer")?.parse().map_err(bad_number)?;
            if idx != l {
                return Err(Error::io(
                    "ToyNet::read_checkpoint",
                    format!("layer index {idx}, expected {l}"),
                ));
            }
            let act = Activation::from_tag(&expect(&mut parts, "act")?)?;
            let _d_out: usize = expect(&mut parts, "d_out")?.parse().map_err(bad_number)?;
            let _d_in: usize = expect(&mut parts, "d_in")?.parse().map_err(bad_number)?;
            let _rank: usize = expect(&mut parts, "rank")?.parse().map_err(bad_number)?;
            let scale = unhex_f64(&expect(&mut parts, "scale")?)?;
            let w0 = read_matrix(&mut lines, "w0")?;
            let a = read_matrix(&mut lines, "a")?;
            let b = read_matrix(&mut lines, "b")?;
            let adapter = LoraAdapter::from_parts(w0, a, b, scale)?;
            layers.push(Layer {
                adapter,
                activation: act,
            });
        }
        let head = read_matrix(&mut lines, "head")?;
        let trailer = lines.next_line()?;
        if trailer.trim() != "end toynet" {
            return Err(Error::io(
                "ToyNet::read_checkpoint",
                format!("bad trailer {trailer:?}"),
            ));
        }
        if head.cols() != feature_dim {
            return Err(Error::io(
                "ToyNet::read_checkpoint",
                format!("head width {} vs feature dim {feature_dim}", head.cols()),
            ));
        }
        let declared_input = layers
            .first()
            .map(|l| l.adapter.d_in())
            .unwrap_or(input_dim);
        if declared_input != input_dim {
            return Err(Error::io(
                "ToyNet::read_checkpoint",
                format!("layer 0 expects {declared_input} inputs, header says {input_dim}"),
            ));
        }
        Ok(ToyNet {
            layers,
            head,
            feature_dim,
            input_dim,
            version: 0,
        })
    }
}

fn bad_number<E: std::fmt::Display>(e: E) -> Error {
    Error::io("ToyNet::read_checkpoint", format!("bad number: {e}"))
}

pub(crate) fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub(crate) fn unhex_f64(s: &str) -> Result<f64> {
    let bits = u64::from_str_radix(s, 16)
        .map_err(|e| Error::io("checkpoint", format!("bad f64 bits {s:?}: {e}")))?;
    Ok(f64::from_bits(bits))
}

pub(crate) fn write_matrix(
    w: &mut impl Write,
    tag: &str,
    m: &Matrix,
) -> std::io::Result<()> {
    writeln!(w, "{tag} {} {}", m.rows(), m.cols())?;
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| hex_f64(v)).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

pub(crate) struct CheckpointLines<'a, R: BufRead> {
    reader: &'a mut R,
}

impl<'a, R: BufRead> CheckpointLines<'a, R> {
    pub(crate) fn new(reader: &'a mut R) -> Self {
        CheckpointLines { reader }
    }

    pub(crate) fn next_line(&mut self) -> Result<String> {
        let mut buf = String::new();
        let n = self
            .reader
            .read_line(&mut buf)
            .map_err(|e| Error::io("checkpoint", e.to_string()))?;
        if n == 0 {
            return Err(Error::io("checkpoint", "unexpected end of file"));
        }
        while buf.ends_with('\n') || buf.ends_with('\r') {
            buf.pop();
        }
        Ok(buf)
    }
}

pub(crate) fn read_matrix<R: BufRead>(
    lines: &mut CheckpointLines<'_, R>,
    tag: &str,
) -> Result<Matrix> {
    let header = lines.next_line()?;
    let mut parts = header.split_whitespace();
    let got = parts.next().unwrap_or_default();
    if got != tag {
        return Err(Error::io(
            "checkpoint",
            format!("expected matrix {tag:?}, found {got:?}"),
        ));
    }
    let rows: usize = parts
        .next()
        .ok_or_else(|| Error::io("checkpoint", "missing row count"))?
        .parse()
        .map_err(bad_number)?;
    let cols: usize = parts
        .next()
        .ok_or_else(|| Error::io("checkpoint", "missing column count"))?
        .parse()
        .map_err(bad_number)?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = lines.next_line()?;
        for tok in line.split_whitespace() {
            data.push(unhex_f64(tok)?);
        }
    }
    Matrix::from_vec(rows, cols, data)
}

fn parse_fields(line: &str, _shape: &[&str]) -> Result<Vec<u64>> {
    let nums: Vec<u64> = line
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    if nums.len() < 3 {
        return Err(Error::io(
            "checkpoint",
            format!("malformed header line {line:?}"),
        ));
    }
    Ok(nums)
}
