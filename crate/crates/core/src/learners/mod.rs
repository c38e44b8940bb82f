//! Base learners trained by plain mini-batch gradient descent: linear, deep
//! (ReLU MLP), wide & deep and deep & cross.

mod network;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HteError, Result};
use crate::util::{derive_seed, rng, sha256_hex};

pub use network::{Layout, TensorSlot, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Linear,
    Deep,
    WideAndDeep,
    DeepAndCross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    LogLoss,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub hidden_layers: Vec<usize>,
    pub n_cross_layers: usize,
    pub activation: Activation,
    pub loss: Loss,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_penalty: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            kind: LearnerKind::DeepAndCross,
            hidden_layers: vec![32, 16],
            n_cross_layers: 2,
            activation: Activation::Relu,
            loss: Loss::LogLoss,
            learning_rate: 0.05,
            batch_size: 128,
            epochs: 5,
            l2_penalty: 1e-5,
            seed: 17,
        }
    }
}

impl LearnerConfig {
    pub fn linear() -> Self {
        Self {
            kind: LearnerKind::Linear,
            hidden_layers: Vec::new(),
            n_cross_layers: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers.contains(&0) {
            return Err(HteError::param("hidden_layers", "widths must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(HteError::param("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(HteError::param("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HteError::param("learning_rate", "must be positive and finite"));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(HteError::param("l2_penalty", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Same network shape (training hyper-parameters may differ).
    pub fn same_architecture(&self, other: &LearnerConfig) -> bool {
        let hidden = |c: &LearnerConfig| match c.kind {
            LearnerKind::Linear => Vec::new(),
            _ => c.hidden_layers.clone(),
        };
        let cross = |c: &LearnerConfig| match c.kind {
            LearnerKind::DeepAndCross => c.n_cross_layers,
            _ => 0,
        };
        self.kind == other.kind
            && hidden(self) == hidden(other)
            && cross(self) == cross(other)
            && self.activation == other.activation
            && self.loss == other.loss
    }
}

/// Dense training rows: row-major features plus one label per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != dim * y.len() {
            return Err(HteError::Dimension {
                expected: dim * y.len(),
                found: x.len(),
            });
        }
        Ok(Self { dim, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `idx` of `self`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Dataset { dim: self.dim, x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

/// Body of a checkpoint; the id is the SHA-256 of its JSON encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointBody {
    config: LearnerConfig,
    input_dim: usize,
    transform_hash: String,
    tensors: Vec<Tensor>,
    history: Vec<EpochRecord>,
    parent_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub id: String,
    pub config: LearnerConfig,
    pub input_dim: usize,
    pub transform_hash: String,
    pub tensors: Vec<Tensor>,
    pub history: Vec<EpochRecord>,
    pub parent_id: Option<String>,
}

impl ModelCheckpoint {
    fn from_params(
        config: LearnerConfig,
        layout: &Layout,
        params: &[f64],
        transform_hash: String,
        history: Vec<EpochRecord>,
        parent_id: Option<String>,
    ) -> Self {
        let tensors = layout
            .slots
            .iter()
            .map(|s| Tensor {
                name: s.name.clone(),
                shape: s.shape.clone(),
                values: params[s.offset..s.offset + s.len()].to_vec(),
            })
            .collect();
        let body = CheckpointBody {
            config,
            input_dim: layout.input_dim,
            transform_hash,
            tensors,
            history,
            parent_id,
        };
        let id = sha256_hex(serde_json::to_string(&body).expect("checkpoint serializes").as_bytes());
        let CheckpointBody {
            config,
            input_dim,
            transform_hash,
            tensors,
            history,
            parent_id,
        } = body;
        Self {
            id,
            config,
            input_dim,
            transform_hash,
            tensors,
            history,
            parent_id,
        }
    }

    /// Checkpoint holding the given weights, with no history. Tensors must match
    /// the layout implied by `config` and `input_dim`.
    pub fn from_tensors(
        config: LearnerConfig,
        input_dim: usize,
        transform_hash: impl Into<String>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, input_dim);
        let staged = ModelCheckpoint {
            id: String::new(),
            config: config.clone(),
            input_dim,
            transform_hash: transform_hash.into(),
            tensors,
            history: Vec::new(),
            parent_id: None,
        };
        let params = staged.flat_params(&layout)?;
        Ok(Self::from_params(
            config,
            &layout,
            &params,
            staged.transform_hash,
            Vec::new(),
            None,
        ))
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config, self.input_dim)
    }

    /// Flattens tensors in layout order, checking names, shapes and finiteness.
    pub fn flat_params(&self, layout: &Layout) -> Result<Vec<f64>> {
        if self.tensors.len() != layout.slots.len() {
            return Err(HteError::WarmStart(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.tensors.len(),
                layout.slots.len()
            )));
        }
        let mut params = vec![0.0; layout.n_params];
        for (t, slot) in self.tensors.iter().zip(&layout.slots) {
            if t.name != slot.name || t.shape != slot.shape || t.values.len() != slot.len() {
                return Err(HteError::WarmStart(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    t.name, t.shape, slot.name, slot.shape
                )));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(HteError::WarmStart(format!("tensor `{}` holds non-finite values", t.name)));
            }
            params[slot.offset..slot.offset + slot.len()].copy_from_slice(&t.values);
        }
        Ok(params)
    }

    pub fn final_validation_loss(&self) -> Option<f64> {
        self.history.last().and_then(|h| h.validation_loss)
    }

    pub fn predictor(&self) -> Result<Predictor> {
        let layout = self.layout();
        let params = self.flat_params(&layout)?;
        Ok(Predictor {
            loss: self.config.loss,
            layout,
            params,
        })
    }

    /// Probability for log loss, raw value for squared error.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.predictor()?.predict(x)
    }

    pub fn predict_batch(&self, rows: &[f64]) -> Result<Vec<f64>> {
        self.predictor()?.predict_batch(rows)
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ckpt: ModelCheckpoint = serde_json::from_str(text)?;
        let body = CheckpointBody {
            config: ckpt.config.clone(),
            input_dim: ckpt.input_dim,
            transform_hash: ckpt.transform_hash.clone(),
            tensors: ckpt.tensors.clone(),
            history: ckpt.history.clone(),
            parent_id: ckpt.parent_id.clone(),
        };
        let id = sha256_hex(serde_json::to_string(&body)?.as_bytes());
        if id != ckpt.id {
            return Err(HteError::Registry(format!(
                "checkpoint id {} does not match its content ({id})",
                ckpt.id
            )));
        }
        ckpt.flat_params(&ckpt.layout())?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Compiled view of a checkpoint for repeated prediction.
#[derive(Debug, Clone)]
pub struct Predictor {
    loss: Loss,
    layout: Layout,
    params: Vec<f64>,
}

impl Predictor {
    pub fn input_dim(&self) -> usize {
        self.layout.input_dim
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.layout.input_dim {
            return Err(HteError::Dimension {
                expected: self.layout.input_dim,
                found: x.len(),
            });
        }
        let mut ws = self.layout.workspace();
        Ok(link(self.loss, self.layout.forward(&self.params, x, &mut ws)))
    }

    pub fn predict_batch(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let d = self.layout.input_dim;
        if d == 0 || !rows.len().is_multiple_of(d) {
            return Err(HteError::Dimension {
                expected: d,
                found: rows.len(),
            });
        }
        let mut ws = self.layout.workspace();
        Ok(rows
            .chunks_exact(d)
            .map(|x| link(self.loss, self.layout.forward(&self.params, x, &mut ws)))
            .collect())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn link(loss: Loss, raw: f64) -> f64 {
    match loss {
        Loss::LogLoss => sigmoid(raw),
        Loss::SquaredError => raw,
    }
}

/// Per-sample loss on the raw output and its derivative.
fn loss_and_grad(loss: Loss, raw: f64, y: f64) -> (f64, f64) {
    match loss {
        Loss::LogLoss => {
            // softplus(raw) - y * raw, computed stably
            let softplus = raw.max(0.0) + (-raw.abs()).exp().ln_1p();
            (softplus - y * raw, sigmoid(raw) - y)
        }
        Loss::SquaredError => {
            let r = raw - y;
            (r * r, 2.0 * r)
        }
    }
}

fn check_labels(loss: Loss, data: &Dataset) -> Result<()> {
    if loss == Loss::LogLoss && data.y.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(HteError::param("loss", "log_loss requires labels in {0, 1}"));
    }
    if data.y.iter().any(|y| !y.is_finite()) {
        return Err(HteError::param("labels", "labels must be finite"));
    }
    Ok(())
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, drawn in layout order.
fn init_params(layout: &Layout, seed: u64) -> Vec<f64> {
    let mut r = rng(derive_seed(seed, 0x696e_6974));
    let mut params = vec![0.0; layout.n_params];
    for slot in &layout.slots {
        if slot.is_bias {
            continue;
        }
        let limit = 1.0 / (slot.fan_in.max(1) as f64).sqrt();
        for p in &mut params[slot.offset..slot.offset + slot.len()] {
            *p = r.random_range(-limit..limit);
        }
    }
    params
}

/// Mean data loss over `data` plus the L2 term.
fn objective(layout: &Layout, params: &[f64], loss: Loss, l2: f64, data: &Dataset) -> f64 {
    mean_loss(layout, params, loss, data) + l2_term(layout, params, l2)
}

fn mean_loss(layout: &Layout, params: &[f64], loss: Loss, data: &Dataset) -> f64 {
    let mut ws = layout.workspace();
    let total: f64 = (0..data.len())
        .map(|i| loss_and_grad(loss, layout.forward(params, data.row(i), &mut ws), data.y[i]).0)
        .sum();
    total / data.len() as f64
}

fn l2_term(layout: &Layout, params: &[f64], l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let sq: f64 = layout
        .slots
        .iter()
        .filter(|s| !s.is_bias)
        .flat_map(|s| &params[s.offset..s.offset + s.len()])
        .map(|w| w * w)
        .sum();
    0.5 * l2 * sq
}

/// Gradient of the objective over the rows `idx`; returns the mean data loss.
fn batch_gradient(
    layout: &Layout,
    params: &[f64],
    loss: Loss,
    l2: f64,
    data: &Dataset,
    idx: &[usize],
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / idx.len() as f64;
    let mut total = 0.0;
    for &i in idx {
        let x = data.row(i);
        let raw = layout.forward(params, x, ws);
        let (l, d) = loss_and_grad(loss, raw, data.y[i]);
        total += l;
        layout.backward(params, x, ws, d * scale, grad);
    }
    if l2 > 0.0 {
        for slot in layout.slots.iter().filter(|s| !s.is_bias) {
            for k in slot.offset..slot.offset + slot.len() {
                grad[k] += l2 * params[k];
            }
        }
    }
    total * scale
}

/// Trains one model. With `init`, training resumes from its weights and the
/// result records it as parent.
pub fn train(
    cfg: &LearnerConfig,
    data: &Dataset,
    validation: Option<&Dataset>,
    init: Option<&ModelCheckpoint>,
    transform_hash: &str,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HteError::param("data", "no training rows"));
    }
    check_labels(cfg.loss, data)?;
    if let Some(v) = validation {
        check_labels(cfg.loss, v)?;
        if v.dim != data.dim {
            return Err(HteError::Dimension {
                expected: data.dim,
                found: v.dim,
            });
        }
    }
    let layout = Layout::new(cfg, data.dim);
    let (mut params, mut history, parent_id) = match init {
        Some(parent) => {
            if !parent.config.same_architecture(cfg) {
                return Err(HteError::WarmStart(format!(
                    "parent {} has a different architecture",
                    parent.id
                )));
            }
            if parent.input_dim != data.dim {
                return Err(HteError::WarmStart(format!(
                    "parent input dimension {} differs from data dimension {}",
                    parent.input_dim, data.dim
                )));
            }
            (
                parent.flat_params(&layout)?,
                parent.history.clone(),
                Some(parent.id.clone()),
            )
        }
        None => (init_params(&layout, cfg.seed), Vec::new(), None),
    };
    let first_epoch = history.last().map(|h| h.epoch + 1).unwrap_or(0);

    let mut ws = layout.workspace();
    let mut grad = vec![0.0; layout.n_params];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for e in 0..cfg.epochs {
        let epoch = first_epoch + e;
        let mut shuffler = rng(derive_seed(cfg.seed, 0x6570_0000 + epoch as u64));
        order.shuffle(&mut shuffler);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let l = batch_gradient(&layout, &params, cfg.loss, cfg.l2_penalty, data, idx, &mut ws, &mut grad);
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(HteError::Divergence { epoch, batch: b });
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
        let train_loss = mean_loss(&layout, &params, cfg.loss, data);
        if !train_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(HteError::Divergence {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        let validation_loss = validation
            .filter(|v| !v.is_empty())
            .map(|v| mean_loss(&layout, &params, cfg.loss, v));
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
    }
    Ok(ModelCheckpoint::from_params(
        cfg.clone(),
        &layout,
        &params,
        transform_hash.to_string(),
        history,
        parent_id,
    ))
}

/// Relative-error floor: differences between gradients smaller than this in
/// magnitude are compared absolutely.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Maximum relative error between analytic gradients of the training objective
/// and central finite differences, over every parameter of a freshly
/// initialized model. Hidden units whose pre-activation sits near the ReLU
/// kink on some sample get their bias nudged first.
pub fn gradient_check(cfg: &LearnerConfig, batch: &Dataset, epsilon: f64) -> Result<f64> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(HteError::param("batch", "needs at least one row"));
    }
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(HteError::param("epsilon", "must lie in [1e-7, 1e-3]"));
    }
    check_labels(cfg.loss, batch)?;
    let layout = Layout::new(cfg, batch.dim);
    let mut params = init_params(&layout, cfg.seed);
    nudge_off_kinks(&layout, &mut params, batch, 1e3 * epsilon);

    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; layout.n_params];
    let mut ws = layout.workspace();
    batch_gradient(&layout, &params, cfg.loss, cfg.l2_penalty, batch, &idx, &mut ws, &mut grad);

    let mut worst = 0.0f64;
    for k in 0..layout.n_params {
        let keep = params[k];
        params[k] = keep + epsilon;
        let up = objective(&layout, &params, cfg.loss, cfg.l2_penalty, batch);
        params[k] = keep - epsilon;
        let down = objective(&layout, &params, cfg.loss, cfg.l2_penalty, batch);
        params[k] = keep;
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = grad[k].abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
        worst = worst.max((grad[k] - numeric).abs() / denom);
    }
    Ok(worst)
}

fn nudge_off_kinks(layout: &Layout, params: &mut [f64], batch: &Dataset, margin: f64) {
    let mut ws = layout.workspace();
    for _ in 0..1000 {
        let mut offender = None;
        'rows: for i in 0..batch.len() {
            layout.forward(params, batch.row(i), &mut ws);
            for (l, u, z) in layout.pre_activations(&ws) {
                if z.abs() < margin {
                    offender = Some((l, u, z));
                    break 'rows;
                }
            }
        }
        match offender {
            Some((l, u, z)) => {
                let b = layout.deep_bias_offset(l) + u;
                // only ever raised, so rows cleared for this unit stay cleared
                params[b] += 2.0 * margin - z;
            }
            None => return,
        }
    }
}
