//! A small deterministic model family for (user, item) scoring.
//!
//! The architecture is NeuMF-lite: a GMF branch (elementwise product of the
//! user and item embeddings) concatenated with an MLP branch over the
//! concatenated embeddings, then a final linear layer and a sigmoid. The
//! last entry of `mlp_layers` is that final layer and must have width 1;
//! `mlp_layers = [1]` degenerates to logistic regression on
//! `[gmf, user_emb, item_emb]`.
//!
//! Training is plain seeded minibatch SGD with manual backpropagation and
//! optional per-sample weights. Everything is single-threaded and
//! deterministic: `(spec, data, config, seed)` fully determine the trained
//! parameters.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("bce labels must be 0 or 1, got {0}")]
    BadLabel(f64),
    #[error("sample (user {user}, item {item}) outside spec dims")]
    SampleOutOfRange { user: usize, item: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (learning rate {learning_rate})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },
    #[error("cannot read or write checkpoint {path}: {source}")]
    CheckpointIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Architecture of the embedding+MLP scorer (output is always a sigmoid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub embedding_dim: usize,
    /// Hidden widths followed by the final layer, which must have width 1.
    pub mlp_layers: Vec<usize>,
    pub dropout_rate: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_users == 0 || self.n_items == 0 {
            return Err(NnError::InvalidSpec("need at least one user and item".into()));
        }
        if self.embedding_dim == 0 {
            return Err(NnError::InvalidSpec("embedding_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::InvalidSpec(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        match self.mlp_layers.last() {
            Some(1) => Ok(()),
            _ => Err(NnError::InvalidSpec(
                "mlp_layers must end with a width-1 output layer".into(),
            )),
        }
    }

    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Parameter offsets into the flat vector. Layout order: user embeddings,
/// item embeddings, hidden layers (weights then bias), fusion layer.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub d: usize,
    pub user_off: usize,
    pub item_off: usize,
    /// (weight_offset, bias_offset, rows, cols) per hidden layer.
    pub hidden: Vec<(usize, usize, usize, usize)>,
    pub fusion_w_off: usize,
    pub fusion_b_off: usize,
    pub fusion_in: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let d = spec.embedding_dim;
        let user_off = 0;
        let item_off = spec.n_users * d;
        let mut cursor = item_off + spec.n_items * d;
        let hidden_widths = &spec.mlp_layers[..spec.mlp_layers.len().saturating_sub(1)];
        let mut hidden = Vec::with_capacity(hidden_widths.len());
        let mut in_dim = 2 * d;
        for &rows in hidden_widths {
            let w_off = cursor;
            cursor += rows * in_dim;
            let b_off = cursor;
            cursor += rows;
            hidden.push((w_off, b_off, rows, in_dim));
            in_dim = rows;
        }
        let fusion_in = d + in_dim;
        let fusion_w_off = cursor;
        cursor += fusion_in;
        let fusion_b_off = cursor;
        cursor += 1;
        Self {
            d,
            user_off,
            item_off,
            hidden,
            fusion_w_off,
            fusion_b_off,
            fusion_in,
            total: cursor,
        }
    }
}

/// A spec plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub parameters: Vec<f64>,
    pub training_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Bce,
    Mse,
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loss::Bce => write!(f, "bce"),
            Loss::Mse => write!(f, "mse"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss: Loss,
    /// One positive weight per training sample; `None` means all ones.
    #[serde(skip)]
    pub per_sample_weights: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, loss: Loss) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            weight_decay: 0.0,
            loss,
            per_sample_weights: None,
        }
    }

    fn validate(&self, n_samples: usize) -> Result<(), NnError> {
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if let Some(w) = &self.per_sample_weights {
            if w.len() != n_samples {
                return Err(NnError::InvalidConfig(format!(
                    "{} weights for {} samples",
                    w.len(),
                    n_samples
                )));
            }
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(NnError::InvalidConfig(
                    "per-sample weights must all be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub user: usize,
    pub item: usize,
    pub label: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictMode {
    /// Plain forward pass; inverted dropout needs no rescaling here.
    Deterministic,
    /// A fresh seeded dropout mask per sample, for MC-Dropout averaging.
    DropoutActive { seed: u64 },
}

/// A trained model plus its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws parameters from a seeded scaled-uniform initializer: embeddings
/// from `U(-1/sqrt(d), 1/sqrt(d))`, linear weights Glorot-uniform, biases 0.
pub fn init(spec: &ModelSpec, seed: u64) -> Result<TrainedModel, NnError> {
    spec.validate()?;
    let layout = Layout::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parameters = vec![0.0; layout.total];

    let emb_scale = 1.0 / (spec.embedding_dim as f64).sqrt();
    for p in parameters
        .iter_mut()
        .take(layout.item_off + spec.n_items * layout.d)
    {
        *p = rng.gen_range(-emb_scale..emb_scale);
    }
    for &(w_off, _, rows, cols) in &layout.hidden {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        for p in parameters[w_off..w_off + rows * cols].iter_mut() {
            *p = rng.gen_range(-scale..scale);
        }
    }
    let scale = (6.0 / (layout.fusion_in + 1) as f64).sqrt();
    for p in parameters[layout.fusion_w_off..layout.fusion_w_off + layout.fusion_in].iter_mut() {
        *p = rng.gen_range(-scale..scale);
    }

    Ok(TrainedModel {
        spec: spec.clone(),
        parameters,
        training_seed: seed,
    })
}

/// Reusable per-sample forward state.
pub(crate) struct Workspace {
    /// acts[0] = concat(user_emb, item_emb); acts[k+1] = hidden layer k output.
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    /// Dropout scale per hidden unit: 0 (dropped) or 1/keep.
    masks: Vec<Vec<f64>>,
    fusion_in: Vec<f64>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
    user: usize,
    item: usize,
}

impl Workspace {
    pub fn new(layout: &Layout) -> Self {
        let mut acts = vec![vec![0.0; 2 * layout.d]];
        let mut pres = Vec::new();
        let mut masks = Vec::new();
        let mut max_width = 2 * layout.d;
        for &(_, _, rows, _) in &layout.hidden {
            acts.push(vec![0.0; rows]);
            pres.push(vec![0.0; rows]);
            masks.push(vec![1.0; rows]);
            max_width = max_width.max(rows);
        }
        Self {
            acts,
            pres,
            masks,
            fusion_in: vec![0.0; layout.fusion_in],
            delta: vec![0.0; max_width],
            delta_next: vec![0.0; max_width],
            logit: 0.0,
            prob: 0.0,
            user: 0,
            item: 0,
        }
    }
}

/// Forward pass. `dropout` carries the RNG when masks should be sampled;
/// `None` is the deterministic (expectation) path.
pub(crate) fn forward(
    layout: &Layout,
    params: &[f64],
    dropout_rate: f64,
    user: usize,
    item: usize,
    dropout: Option<&mut ChaCha8Rng>,
    ws: &mut Workspace,
) {
    let d = layout.d;
    let eu = &params[layout.user_off + user * d..layout.user_off + (user + 1) * d];
    let ei = &params[layout.item_off + item * d..layout.item_off + (item + 1) * d];
    ws.user = user;
    ws.item = item;
    ws.acts[0][..d].copy_from_slice(eu);
    ws.acts[0][d..].copy_from_slice(ei);

    let mut rng = dropout;
    let keep = 1.0 - dropout_rate;
    for (k, &(w_off, b_off, rows, cols)) in layout.hidden.iter().enumerate() {
        let (head, tail) = ws.acts.split_at_mut(k + 1);
        let input = &head[k];
        let out = &mut tail[0];
        for r in 0..rows {
            let w = &params[w_off + r * cols..w_off + (r + 1) * cols];
            let mut z = params[b_off + r];
            for c in 0..cols {
                z += w[c] * input[c];
            }
            ws.pres[k][r] = z;
            let mut a = z.max(0.0);
            let scale = match rng.as_deref_mut() {
                Some(rng) if dropout_rate > 0.0 => {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }
                _ => 1.0,
            };
            ws.masks[k][r] = scale;
            a *= scale;
            out[r] = a;
        }
    }

    for k in 0..d {
        ws.fusion_in[k] = eu[k] * ei[k];
    }
    let tail = ws.acts.last().unwrap();
    ws.fusion_in[d..].copy_from_slice(tail);

    let mut logit = params[layout.fusion_b_off];
    let wf = &params[layout.fusion_w_off..layout.fusion_w_off + layout.fusion_in];
    for (w, x) in wf.iter().zip(&ws.fusion_in) {
        logit += w * x;
    }
    ws.logit = logit;
    ws.prob = sigmoid(logit);
}

/// Accumulates `d loss / d params` into `grad`, given `d loss / d logit`.
pub(crate) fn backward(
    layout: &Layout,
    params: &[f64],
    ws: &mut Workspace,
    dlogit: f64,
    grad: &mut [f64],
) {
    let d = layout.d;
    let eu_off = layout.user_off + ws.user * d;
    let ei_off = layout.item_off + ws.item * d;

    grad[layout.fusion_b_off] += dlogit;
    for (j, x) in ws.fusion_in.iter().enumerate() {
        grad[layout.fusion_w_off + j] += dlogit * x;
    }

    // Gradient w.r.t. the fusion input: GMF part feeds the embeddings
    // directly, the tail feeds back through the MLP stack.
    for k in 0..d {
        let dz = dlogit * params[layout.fusion_w_off + k];
        grad[eu_off + k] += dz * params[ei_off + k];
        grad[ei_off + k] += dz * params[eu_off + k];
    }
    let tail_len = layout.fusion_in - d;
    for j in 0..tail_len {
        ws.delta[j] = dlogit * params[layout.fusion_w_off + d + j];
    }

    for (k, &(w_off, b_off, rows, cols)) in layout.hidden.iter().enumerate().rev() {
        for r in 0..rows {
            let mut dr = ws.delta[r] * ws.masks[k][r];
            if ws.pres[k][r] <= 0.0 {
                dr = 0.0;
            }
            ws.delta[r] = dr;
        }
        ws.delta_next[..cols].fill(0.0);
        let input = &ws.acts[k];
        for r in 0..rows {
            let dr = ws.delta[r];
            if dr == 0.0 {
                continue;
            }
            grad[b_off + r] += dr;
            let w = &params[w_off + r * cols..w_off + (r + 1) * cols];
            let gw = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
            for c in 0..cols {
                gw[c] += dr * input[c];
                ws.delta_next[c] += dr * w[c];
            }
        }
        ws.delta[..cols].copy_from_slice(&ws.delta_next[..cols]);
    }

    // delta now holds the gradient w.r.t. acts[0] = concat(eu, ei).
    for k in 0..d {
        grad[eu_off + k] += ws.delta[k];
        grad[ei_off + k] += ws.delta[d + k];
    }
}

/// Loss value and d loss / d logit for one sample.
pub(crate) fn loss_and_dlogit(loss: Loss, prob: f64, label: f64) -> (f64, f64) {
    match loss {
        Loss::Bce => {
            let p = prob.clamp(1e-12, 1.0 - 1e-12);
            let value = -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
            (value, prob - label)
        }
        Loss::Mse => {
            let diff = prob - label;
            (diff * diff, 2.0 * diff * prob * (1.0 - prob))
        }
    }
}

fn validate_samples(spec: &ModelSpec, samples: &[Sample], loss: Loss) -> Result<(), NnError> {
    for s in samples {
        if s.user >= spec.n_users || s.item >= spec.n_items {
            return Err(NnError::SampleOutOfRange {
                user: s.user,
                item: s.item,
            });
        }
        if loss == Loss::Bce && s.label != 0.0 && s.label != 1.0 {
            return Err(NnError::BadLabel(s.label));
        }
    }
    Ok(())
}

/// Seeded minibatch SGD on the mean per-sample-weighted loss.
///
/// Per epoch the sample order is reshuffled from the training RNG; dropout
/// masks (when the spec enables dropout) come from the same stream, so the
/// whole trajectory is a pure function of `(model, samples, config, seed)`.
pub fn train(
    model: &TrainedModel,
    samples: &[Sample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, NnError> {
    model.spec.validate()?;
    config.validate(samples.len())?;
    validate_samples(&model.spec, samples, config.loss)?;

    let layout = Layout::new(&model.spec);
    let mut params = model.parameters.clone();
    let mut grad = vec![0.0; layout.total];
    let mut ws = Workspace::new(&layout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let dropout = model.spec.dropout_rate;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &k in batch {
                let s = &samples[k];
                let w = config.per_sample_weights.as_ref().map_or(1.0, |ws| ws[k]);
                let mask_rng = if dropout > 0.0 { Some(&mut rng) } else { None };
                forward(&layout, &params, dropout, s.user, s.item, mask_rng, &mut ws);
                let (value, dlogit) = loss_and_dlogit(config.loss, ws.prob, s.label);
                batch_loss += w * value;
                backward(&layout, &params, &mut ws, w * dlogit, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(NnError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    learning_rate: config.learning_rate,
                });
            }
            epoch_loss += batch_loss;
            let inv_batch = 1.0 / batch.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * (g * inv_batch + config.weight_decay * *p);
            }
        }
        epoch_losses.push(epoch_loss / samples.len() as f64);
    }

    Ok(TrainOutcome {
        model: TrainedModel {
            spec: model.spec.clone(),
            parameters: params,
            training_seed: seed,
        },
        epoch_losses,
    })
}

/// Sigmoid outputs for `pairs`, all in (0, 1).
pub fn predict(model: &TrainedModel, pairs: &[(usize, usize)], mode: PredictMode) -> Vec<f64> {
    let layout = Layout::new(&model.spec);
    let mut ws = Workspace::new(&layout);
    let mut rng = match mode {
        PredictMode::Deterministic => None,
        PredictMode::DropoutActive { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    pairs
        .iter()
        .map(|&(user, item)| {
            forward(
                &layout,
                &model.parameters,
                model.spec.dropout_rate,
                user,
                item,
                rng.as_mut(),
                &mut ws,
            );
            ws.prob
        })
        .collect()
}

/// Mean per-sample-weighted loss at fixed parameters (deterministic forward).
pub fn evaluate_loss(
    model: &TrainedModel,
    samples: &[Sample],
    loss: Loss,
    weights: Option<&[f64]>,
) -> Result<f64, NnError> {
    validate_samples(&model.spec, samples, loss)?;
    let layout = Layout::new(&model.spec);
    let mut ws = Workspace::new(&layout);
    let mut total = 0.0;
    for (k, s) in samples.iter().enumerate() {
        forward(&layout, &model.parameters, 0.0, s.user, s.item, None, &mut ws);
        let (value, _) = loss_and_dlogit(loss, ws.prob, s.label);
        total += weights.map_or(1.0, |w| w[k]) * value;
    }
    Ok(total / samples.len() as f64)
}

/// Analytic batch gradient (mean weighted loss, dropout disabled).
pub(crate) fn batch_gradient(
    model: &TrainedModel,
    samples: &[Sample],
    loss: Loss,
    weights: Option<&[f64]>,
) -> Vec<f64> {
    let layout = Layout::new(&model.spec);
    let mut ws = Workspace::new(&layout);
    let mut grad = vec![0.0; layout.total];
    for (k, s) in samples.iter().enumerate() {
        forward(&layout, &model.parameters, 0.0, s.user, s.item, None, &mut ws);
        let (_, dlogit) = loss_and_dlogit(loss, ws.prob, s.label);
        let w = weights.map_or(1.0, |w| w[k]);
        backward(&layout, &model.parameters, &mut ws, w * dlogit, &mut grad);
    }
    let inv = 1.0 / samples.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    grad
}

/// Compares the analytic gradient against central finite differences,
/// parameter by parameter, with dropout disabled. Returns the maximum
/// relative error.
pub fn gradient_check(
    spec: &ModelSpec,
    samples: &[Sample],
    loss: Loss,
    weights: Option<&[f64]>,
    epsilon: f64,
    seed: u64,
) -> Result<f64, NnError> {
    let mut model = init(spec, seed)?;
    validate_samples(spec, samples, loss)?;
    let analytic = batch_gradient(&model, samples, loss, weights);
    let mut max_rel = 0.0f64;
    for (j, &exact) in analytic.iter().enumerate() {
        let saved = model.parameters[j];
        model.parameters[j] = saved + epsilon;
        let plus = evaluate_loss(&model, samples, loss, weights)?;
        model.parameters[j] = saved - epsilon;
        let minus = evaluate_loss(&model, samples, loss, weights)?;
        model.parameters[j] = saved;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    spec: ModelSpec,
    training_seed: u64,
}

/// Writes a checkpoint: a JSON header line, then one parameter per line in
/// shortest-round-trip decimal form.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), NnError> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        training_seed: model.training_seed,
    };
    let mut out = serde_json::to_string(&header)
        .map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
    out.push('\n');
    for p in &model.parameters {
        out.push_str(&format!("{p:?}\n"));
    }
    std::fs::write(path, out).map_err(|source| NnError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<TrainedModel, NnError> {
    let text = std::fs::read_to_string(path).map_err(|source| NnError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header: CheckpointHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| NnError::BadCheckpoint("empty checkpoint".into()))?,
    )
    .map_err(|e| NnError::BadCheckpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(NnError::BadCheckpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let parameters: Vec<f64> = lines
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| NnError::BadCheckpoint(format!("bad parameter {l:?}")))
        })
        .collect::<Result<_, _>>()?;
    let expected = header.spec.parameter_count();
    if parameters.len() != expected {
        return Err(NnError::BadCheckpoint(format!(
            "expected {expected} parameters, found {}",
            parameters.len()
        )));
    }
    Ok(TrainedModel {
        spec: header.spec,
        parameters,
        training_seed: header.training_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn spec(n_users: usize, n_items: usize, mlp: &[usize], dropout: f64) -> ModelSpec {
        ModelSpec {
            n_users,
            n_items,
            embedding_dim: 8,
            mlp_layers: mlp.to_vec(),
            dropout_rate: dropout,
        }
    }

    fn toy_samples() -> Vec<Sample> {
        vec![
            Sample { user: 0, item: 0, label: 1.0 },
            Sample { user: 1, item: 1, label: 0.0 },
            Sample { user: 0, item: 2, label: 1.0 },
            Sample { user: 2, item: 1, label: 0.0 },
        ]
    }

    #[test]
    fn init_is_seed_deterministic() {
        let s = spec(5, 7, &[16, 1], 0.0);
        assert_eq!(init(&s, 3).unwrap(), init(&s, 3).unwrap());
        assert_ne!(
            init(&s, 3).unwrap().parameters,
            init(&s, 4).unwrap().parameters
        );
    }

    #[test]
    fn parameter_count_matches_hand_derivation() {
        // 5*8 + 7*8 user/item embeddings, one 16-wide hidden layer over the
        // 16-dim concat (256 weights + 16 biases), fusion over 8 + 16 = 24
        // inputs plus bias: 40 + 56 + 272 + 25 = 393.
        let s = spec(5, 7, &[16, 1], 0.0);
        assert_eq!(s.parameter_count(), 393);
        assert_eq!(init(&s, 0).unwrap().parameters.len(), 393);
    }

    #[test]
    fn spec_validation() {
        assert!(spec(5, 5, &[16, 1], 0.0).validate().is_ok());
        assert!(spec(5, 5, &[1], 0.0).validate().is_ok());
        assert!(spec(5, 5, &[16, 2], 0.0).validate().is_err());
        assert!(spec(5, 5, &[], 0.0).validate().is_err());
        assert!(spec(5, 5, &[1], 1.0).validate().is_err());
        assert!(spec(0, 5, &[1], 0.0).validate().is_err());
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let s = spec(3, 3, &[8, 1], 0.2);
        let model = init(&s, 1).unwrap();
        let cfg = TrainConfig::new(0, 2, 0.1, Loss::Bce);
        let out = train(&model, &toy_samples(), &cfg, 9).unwrap();
        assert_eq!(out.model.parameters, model.parameters);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn doubled_weights_match_halved_learning_rate() {
        let s = spec(3, 3, &[8, 1], 0.0);
        let model = init(&s, 2).unwrap();
        let samples = toy_samples();
        let mut cfg_a = TrainConfig::new(5, 2, 0.1, Loss::Bce);
        cfg_a.per_sample_weights = Some(vec![1.0; samples.len()]);
        let mut cfg_b = TrainConfig::new(5, 2, 0.05, Loss::Bce);
        cfg_b.per_sample_weights = Some(vec![2.0; samples.len()]);
        let a = train(&model, &samples, &cfg_a, 7).unwrap();
        let b = train(&model, &samples, &cfg_b, 7).unwrap();
        assert_eq!(a.model.parameters, b.model.parameters);
    }

    #[test]
    fn loss_decreases_on_separable_toy_problem() {
        let s = spec(2, 2, &[8, 1], 0.0);
        let model = init(&s, 3).unwrap();
        let samples = vec![
            Sample { user: 0, item: 0, label: 1.0 },
            Sample { user: 1, item: 1, label: 0.0 },
        ];
        let cfg = TrainConfig::new(10, 2, 0.5, Loss::Bce);
        let out = train(&model, &samples, &cfg, 4).unwrap();
        for w in out.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "losses not strictly decreasing: {:?}", out.epoch_losses);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let s = spec(4, 4, &[8, 1], 0.3);
        let model = init(&s, 5).unwrap();
        let cfg = TrainConfig::new(3, 2, 0.1, Loss::Bce);
        let a = train(&model, &toy_samples(), &cfg, 11).unwrap();
        let b = train(&model, &toy_samples(), &cfg, 11).unwrap();
        assert_eq!(a.model.parameters, b.model.parameters);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn predictions_stay_in_unit_interval() {
        let s = spec(4, 4, &[8, 1], 0.2);
        let model = init(&s, 6).unwrap();
        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|u| (0..4).map(move |i| (u, i))).collect();
        for p in predict(&model, &pairs, PredictMode::Deterministic) {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn deterministic_mode_is_repeatable() {
        let s = spec(4, 4, &[8, 1], 0.2);
        let model = init(&s, 6).unwrap();
        let pairs = vec![(0, 1), (2, 3)];
        assert_eq!(
            predict(&model, &pairs, PredictMode::Deterministic),
            predict(&model, &pairs, PredictMode::Deterministic)
        );
    }

    #[test]
    fn zero_dropout_active_equals_deterministic() {
        let s = spec(4, 4, &[8, 1], 0.0);
        let model = init(&s, 6).unwrap();
        let pairs = vec![(0, 1), (2, 3), (1, 0)];
        assert_eq!(
            predict(&model, &pairs, PredictMode::DropoutActive { seed: 42 }),
            predict(&model, &pairs, PredictMode::Deterministic)
        );
    }

    #[test]
    fn dropout_active_is_seed_deterministic() {
        let s = spec(4, 4, &[8, 1], 0.4);
        let model = init(&s, 6).unwrap();
        let pairs = vec![(0, 1), (2, 3)];
        let a = predict(&model, &pairs, PredictMode::DropoutActive { seed: 1 });
        let b = predict(&model, &pairs, PredictMode::DropoutActive { seed: 1 });
        let c = predict(&model, &pairs, PredictMode::DropoutActive { seed: 2 });
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gradient_check_passes_across_architectures() {
        let samples = toy_samples();
        for mlp in [vec![1], vec![8, 1], vec![32, 16, 1]] {
            for loss in [Loss::Bce, Loss::Mse] {
                let s = spec(3, 3, &mlp, 0.0);
                let err = gradient_check(&s, &samples, loss, None, 1e-5, 12).unwrap();
                assert!(err < 1e-4, "mlp {mlp:?} {loss}: max rel err {err}");
            }
        }
    }

    #[test]
    fn gradient_check_with_weights() {
        let s = spec(3, 3, &[8, 1], 0.0);
        let w = vec![0.5, 2.0, 1.5, 3.0];
        let err = gradient_check(&s, &toy_samples(), Loss::Bce, Some(&w), 1e-5, 13).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn zero_loss_batch_has_zero_gradient() {
        // With MSE and labels equal to the model output, the gradient vanishes.
        let s = spec(2, 2, &[8, 1], 0.0);
        let model = init(&s, 14).unwrap();
        let probs = predict(&model, &[(0, 0), (1, 1)], PredictMode::Deterministic);
        let samples = vec![
            Sample { user: 0, item: 0, label: probs[0] },
            Sample { user: 1, item: 1, label: probs[1] },
        ];
        let grad = batch_gradient(&model, &samples, Loss::Mse, None);
        let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-12, "gradient norm {norm}");
    }

    #[test]
    fn doubling_a_weight_doubles_its_gradient_contribution() {
        let s = spec(3, 3, &[8, 1], 0.0);
        let model = init(&s, 15).unwrap();
        let sample = [Sample { user: 1, item: 2, label: 1.0 }];
        let g1 = batch_gradient(&model, &sample, Loss::Bce, Some(&[1.0]));
        let g2 = batch_gradient(&model, &sample, Loss::Bce, Some(&[2.0]));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_loss_is_linear_in_weights() {
        let s = spec(3, 3, &[8, 1], 0.0);
        let model = init(&s, 16).unwrap();
        let samples = toy_samples();
        let a = vec![0.5, 1.0, 2.0, 0.25];
        let b = vec![1.5, 0.5, 1.0, 2.0];
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let la = evaluate_loss(&model, &samples, Loss::Bce, Some(&a)).unwrap();
        let lb = evaluate_loss(&model, &samples, Loss::Bce, Some(&b)).unwrap();
        let lab = evaluate_loss(&model, &samples, Loss::Bce, Some(&ab)).unwrap();
        assert!((lab - (la + lb)).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_soft_labels() {
        let s = spec(2, 2, &[1], 0.0);
        let model = init(&s, 0).unwrap();
        let cfg = TrainConfig::new(1, 1, 0.1, Loss::Bce);
        let bad = vec![Sample { user: 0, item: 0, label: 0.5 }];
        assert!(matches!(
            train(&model, &bad, &cfg, 0),
            Err(NnError::BadLabel(_))
        ));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = TempDir::new().unwrap();
        let s = spec(3, 4, &[8, 1], 0.2);
        let model = init(&s, 17).unwrap();
        let cfg = TrainConfig::new(2, 2, 0.1, Loss::Bce);
        let trained = train(&model, &toy_samples(), &cfg, 18).unwrap().model;
        let path = dir.path().join("model.ckpt");
        save_model(&trained, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, trained);
    }

    #[test]
    fn checkpoint_rejects_bad_version() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(
            &path,
            "{\"version\":99,\"spec\":{\"n_users\":1,\"n_items\":1,\"embedding_dim\":1,\"mlp_layers\":[1],\"dropout_rate\":0.0},\"training_seed\":0}\n",
        )
        .unwrap();
        assert!(matches!(
            load_model(&path),
            Err(NnError::BadCheckpoint(_))
        ));
    }
}
