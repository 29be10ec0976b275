// SPDX-License-Identifier: Apache-2.0

//! Losses, optimizer, splitting, and the early-stopped training loop.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::batch::{GraphBatch, RatioScaler};
use crate::dataset::Sample;
use crate::model::{FuncGnn, Mode, ModelConfig, ModelError};

/// Embeddings with a smaller norm make cosine distance undefined.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("{pred} predictions for {label} labels")]
    LengthMismatch { pred: usize, label: usize },
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("embedding of node {node} has norm below 1e-12")]
    ZeroEmbedding { node: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Spp,
    Ttdp,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Spp => "spp",
            Task::Ttdp => "ttdp",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "spp" => Ok(Task::Spp),
            "ttdp" => Ok(Task::Ttdp),
            _ => Err(format!("unknown task {s:?} (expected spp or ttdp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub task: Task,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 128,
            max_epochs: 500,
            patience: 100,
            split: [0.05, 0.05, 0.9],
            task: Task::Spp,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_fractions(self.split)?;
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad("patience must lie in [1, max_epochs]");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

fn check_fractions(f: [f64; 3]) -> Result<(), TrainError> {
    if f.iter().any(|&x| x.is_nan() || x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrainError::BadFractions(f));
    }
    Ok(())
}

/// Mean absolute error; the SPP training loss and evaluation metric.
pub fn spp_loss(pred: &[f64], label: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            label: label.len(),
        });
    }
    Ok(pred.iter().zip(label).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Node pair `(i, j)` of an embedding matrix with its truth-table distance.
pub type IndexedPair = (usize, usize, f64);

/// MAE between the zero-normed truth-table distances and the zero-normed
/// cosine distances of the embedding pairs, recorded on `tape`.
pub fn ttdp_loss_on_tape(
    tape: &mut Tape,
    z: Var,
    pairs: &[IndexedPair],
) -> Result<Var, TrainError> {
    if pairs.len() < 2 {
        return Err(TrainError::TooFewPairs(pairs.len()));
    }
    let zs = tape.value(z);
    let d = zs.cols();
    for &(i, j, _) in pairs {
        for node in [i, j] {
            if node >= zs.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "ttdp_loss",
                    index: node,
                    len: zs.rows(),
                }
                .into());
            }
            let row = &zs.data()[node * d..(node + 1) * d];
            if row.iter().map(|x| x * x).sum::<f64>().sqrt() < MIN_EMBEDDING_NORM {
                return Err(TrainError::ZeroEmbedding { node });
            }
        }
    }
    let dt: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let target: Arc<[f64]> = crate::sim::zero_norm(&dt)
        .map_err(|_| TrainError::TooFewPairs(pairs.len()))?
        .into();
    let index: Arc<[(usize, usize)]> = pairs.iter().map(|p| (p.0, p.1)).collect();
    let dz = tape.pair_cosine_distance(z, index)?;
    let dz = tape.zero_norm(dz)?;
    Ok(tape.mean_abs_error(dz, target)?)
}

/// [`ttdp_loss_on_tape`] evaluated on fixed embeddings.
pub fn ttdp_loss(embeddings: &Tensor, pairs: &[IndexedPair]) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let z = tape.constant(embeddings.clone());
    let loss = ttdp_loss_on_tape(&mut tape, z, pairs)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments per parameter tensor, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = shapes.into_iter().collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            config: AdamConfig::default(),
        }
    }

    pub fn for_model(model: &FuncGnn) -> Self {
        Self::new(model.params().iter().map(|p| p.value.len()))
    }
}

/// One Adam step with decoupled weight decay: `p -= lr * wd * p`, then the
/// bias-corrected Adam delta. Entries with `None` gradient and frozen
/// parameters are left untouched.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Option<&[f64]>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        }
        .into());
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if g.len() != p.len() || state.m[k].len() != p.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("parameter {k}: {} values, {} grads", p.len(), g.len()),
            }
            .into());
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            p[i] -= lr * weight_decay * p[i];
            p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

fn model_adam_step(
    model: &mut FuncGnn,
    tape: &Tape,
    vars: &[Var],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let grads: Vec<Option<&[f64]>> = model
        .params()
        .iter()
        .zip(vars)
        .map(|(p, &v)| if p.frozen { None } else { tape.grad(v) })
        .collect();
    let mut slices: Vec<&mut [f64]> = model.params_mut().iter_mut().map(|p| p.value.data_mut()).collect();
    adam_step(&mut slices, &grads, state, cfg.lr, cfg.weight_decay)
}

/// Sample indices of the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, cut into contiguous slices of rounded sizes;
/// the test split takes the remainder.
pub fn split_dataset(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split, TrainError> {
    check_fractions(fractions)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

/// Ratio statistics of the given samples.
pub fn fit_scaler(samples: &[Sample], idx: &[usize]) -> RatioScaler {
    let ratios: Vec<f64> = idx.iter().map(|&i| samples[i].graph.gate_ratio).collect();
    RatioScaler::fit(&ratios)
}

pub fn make_batch(samples: &[Sample], idx: &[usize], scaler: &RatioScaler) -> Result<GraphBatch, TrainError> {
    let graphs: Vec<_> = idx.iter().map(|&i| &samples[i].graph).collect();
    Ok(GraphBatch::new(&graphs, scaler)?)
}

/// Pairs of `idx`'s samples re-indexed into their disjoint union.
pub fn batch_pairs(samples: &[Sample], idx: &[usize]) -> Vec<IndexedPair> {
    let mut out = Vec::new();
    let mut offset = 0;
    for &i in idx {
        let s = &samples[i];
        out.extend(s.pairs.iter().map(|p| (p.i + offset, p.j + offset, p.tt_distance)));
        offset += s.num_nodes();
    }
    out
}

fn batch_labels(samples: &[Sample], idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| samples[i].probs.iter().copied()).collect()
}

/// Predicted probabilities and embeddings of every node of `idx`, in order.
pub fn predict_all(
    model: &FuncGnn,
    samples: &[Sample],
    idx: &[usize],
    batch_size: usize,
) -> Result<(Vec<f64>, Tensor), TrainError> {
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    let outs: Vec<_> = chunks
        .par_iter()
        .map(|chunk| -> Result<_, TrainError> {
            let batch = make_batch(samples, chunk, model.scaler())?;
            Ok(model.predict(&batch)?)
        })
        .collect::<Result<_, _>>()?;
    let hidden = model.config().hidden;
    let mut spp = Vec::new();
    let mut z = Vec::new();
    for o in outs {
        spp.extend(o.spp);
        z.extend(o.embeddings.into_data());
    }
    let rows = spp.len();
    Ok((spp, Tensor::matrix(rows, hidden, z)?))
}

/// Task metric of `model` over `idx`: node-level MAE for SPP, MAE over
/// all pairs of the set pooled for TTDP.
pub fn evaluate(
    model: &FuncGnn,
    samples: &[Sample],
    idx: &[usize],
    task: Task,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::EmptySplit("evaluated"));
    }
    let (spp, z) = predict_all(model, samples, idx, batch_size)?;
    match task {
        Task::Spp => spp_loss(&spp, &batch_labels(samples, idx)),
        Task::Ttdp => ttdp_loss(&z, &batch_pairs(samples, idx)),
    }
}

/// Per-circuit metric, in `idx` order.
pub fn evaluate_per_circuit(
    model: &FuncGnn,
    samples: &[Sample],
    idx: &[usize],
    task: Task,
    batch_size: usize,
) -> Result<Vec<f64>, TrainError> {
    let (spp, z) = predict_all(model, samples, idx, batch_size)?;
    let mut offset = 0;
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &samples[i];
        let n = s.num_nodes();
        let m = match task {
            Task::Spp => spp_loss(&spp[offset..offset + n], &s.probs)?,
            Task::Ttdp => {
                let rows = Tensor::matrix(n, z.cols(), z.data()[offset * z.cols()..(offset + n) * z.cols()].to_vec())?;
                ttdp_loss(&rows, &batch_pairs(samples, &[i]))?
            }
        };
        out.push(m);
        offset += n;
    }
    Ok(out)
}

/// MAE of predicting `c` for every node.
pub fn constant_spp_mae(samples: &[Sample], idx: &[usize], c: f64) -> Result<f64, TrainError> {
    let labels = batch_labels(samples, idx);
    spp_loss(&vec![c; labels.len()], &labels)
}

/// TTDP metric of i.i.d. standard-normal embeddings.
pub fn random_embedding_ttdp(
    samples: &[Sample],
    idx: &[usize],
    dim: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let n: usize = idx.iter().map(|&i| samples[i].num_nodes()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    ttdp_loss(&Tensor::matrix(n, dim, z)?, &batch_pairs(samples, idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation metric.
    pub model: FuncGnn,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Metric of the returned model on the train split, evaluation mode.
    pub train_metric: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Loss of one minibatch, recorded on `tape`.
pub fn batch_loss(
    model: &FuncGnn,
    tape: &mut Tape,
    samples: &[Sample],
    idx: &[usize],
    task: Task,
    mode: Mode,
) -> Result<(Var, Vec<Var>), TrainError> {
    let batch = make_batch(samples, idx, model.scaler())?;
    let out = model.forward(tape, &batch, mode)?;
    let loss = match task {
        Task::Spp => tape.mean_abs_error(out.spp, batch_labels(samples, idx).into())?,
        Task::Ttdp => ttdp_loss_on_tape(tape, out.embeddings, &batch_pairs(samples, idx))?,
    };
    Ok((loss, out.params))
}

/// Early-stopped training. The ratio scaler is fitted on the train split.
pub fn train(
    samples: &[Sample],
    split: &Split,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_callback(samples, split, model_cfg, cfg, |_| {})
}

pub fn train_with_callback(
    samples: &[Sample],
    split: &Split,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if split.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut model = FuncGnn::init(model_cfg.clone(), cfg.seed)?;
    model.set_scaler(fit_scaler(samples, &split.train));
    let mut state = AdamState::for_model(&model);
    let mut order = split.train.clone();
    let mut records = Vec::new();
    let mut best = (model.clone(), f64::INFINITY, 0usize);
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0)));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mode = Mode::train(mix(cfg.seed, epoch as u64, b as u64 + 1));
            let (loss, vars) = batch_loss(&model, &mut tape, samples, chunk, cfg.task, mode)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFinite(epoch));
            }
            tape.backward(loss)?;
            model_adam_step(&mut model, &tape, &vars, &mut state, cfg)?;
            total += value;
            batches += 1;
        }
        let val = evaluate(&model, samples, &split.val, cfg.task, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_metric: val,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch} loss {:.6} val {val:.6}", record.train_loss);
        on_epoch(&record);
        records.push(record);
        if val < best.1 {
            best = (model.clone(), val, epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    let (model, best_val, best_epoch) = best;
    let train_metric = evaluate(&model, samples, &split.train, cfg.task, cfg.batch_size)?;
    Ok(TrainOutcome {
        model,
        records,
        best_epoch,
        best_val,
        train_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, GeneratorParams, LabelCaps, Span};
    use crate::model::Arm;

    #[test]
    fn spp_loss_examples() {
        assert_eq!(spp_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(spp_loss(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!((spp_loss(&[0.2, 0.4], &[0.5, 0.5]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(spp_loss(&[0.1], &[0.1, 0.2]), Err(TrainError::LengthMismatch { .. })));
    }

    fn emb(rows: &[[f64; 2]]) -> Tensor {
        Tensor::matrix(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn ttdp_two_pair_example() {
        // pair (0,1): identical, cos distance 0; pair (0,2): orthogonal, 1
        let z = emb(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]);
        let loss = ttdp_loss(&z, &[(0, 1, 1.0), (0, 2, 0.0)]).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ttdp_affine_labels_give_zero() {
        let z = emb(&[[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [-1.0, 0.3]]);
        let pairs = [(0, 1), (0, 2), (1, 3), (2, 3)];
        let dz: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (z.row(i), z.row(j));
                let dot = a[0] * b[0] + a[1] * b[1];
                1.0 - dot / (a[0].hypot(a[1]) * b[0].hypot(b[1]))
            })
            .collect();
        let labeled: Vec<IndexedPair> =
            pairs.iter().zip(&dz).map(|(&(i, j), &d)| (i, j, 0.1 + 0.5 * d)).collect();
        assert!(ttdp_loss(&z, &labeled).unwrap() < 1e-12);
    }

    #[test]
    fn ttdp_errors() {
        let z = emb(&[[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(ttdp_loss(&z, &[(0, 2, 0.5)]), Err(TrainError::TooFewPairs(1))));
        assert!(matches!(
            ttdp_loss(&z, &[(0, 2, 0.5), (1, 2, 0.1)]),
            Err(TrainError::ZeroEmbedding { node: 1 })
        ));
    }

    #[test]
    fn adam_fixtures() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new([2]);
        adam_step(&mut [&mut p], &[Some(&[0.0, 0.0])], &mut st, 1e-3, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        // fresh state, g = 0.5: m_hat = 0.5, v_hat = 0.25, delta = lr * 0.5 / (0.5 + 1e-8)
        let mut p = vec![1.0];
        let mut st = AdamState::new([1]);
        adam_step(&mut [&mut p], &[Some(&[0.5])], &mut st, 1e-3, 0.0).unwrap();
        let want = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15, "{} vs {want}", p[0]);

        // zero gradients: pure decay by (1 - lr wd)
        let mut p = vec![3.0, -1.0];
        let mut st = AdamState::new([2]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Some(&[0.0, 0.0])], &mut st, 1e-3, 1e-4).unwrap();
        }
        let k = (1.0f64 - 1e-7).powi(5);
        assert!((p[0] - 3.0 * k).abs() < 1e-15 && (p[1] + k).abs() < 1e-15);

        // missing gradient leaves the entry alone
        let mut p = vec![3.0];
        let mut st = AdamState::new([1]);
        adam_step(&mut [&mut p], &[None], &mut st, 1e-3, 1e-4).unwrap();
        assert_eq!(p, vec![3.0]);
    }

    #[test]
    fn adam_fits_linear_probe() {
        // y = 2x: one weight, squared error
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 10.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let mut w = vec![0.0];
        let mut st = AdamState::new([1]);
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            let mut t = Tape::new();
            let wv = t.param(Tensor::vector(w.clone()));
            let x = t.constant(Tensor::vector(xs.clone()));
            let y = t.constant(Tensor::vector(ys.iter().map(|v| -v).collect()));
            let pred = t.scale(x, wv).unwrap();
            let r = t.add(pred, y).unwrap();
            let sq = t.mul(r, r).unwrap();
            let s = t.sum(sq);
            loss = t.value(s).data()[0] / xs.len() as f64;
            t.backward(s).unwrap();
            let g = t.grad(wv).unwrap().to_vec();
            adam_step(&mut [&mut w], &[Some(&g)], &mut st, 0.05, 0.0).unwrap();
        }
        assert!(loss < 1e-3, "{loss}");
    }

    #[test]
    fn split_examples() {
        let s = split_dataset(100, [0.05, 0.05, 0.9], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 5, 90));
        assert_eq!(s, split_dataset(100, [0.05, 0.05, 0.9], 1).unwrap());
        let mut all: Vec<usize> = [s.train, s.val, s.test].concat();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(matches!(
            split_dataset(10, [0.5, 0.6, 0.1], 1),
            Err(TrainError::BadFractions(_))
        ));
    }

    fn tiny_corpus() -> Vec<Sample> {
        let p = GeneratorParams {
            count: 12,
            inputs: Span { min: 3, max: 6 },
            ands: Span { min: 8, max: 30 },
            invert_prob: (0.1, 0.5),
            seed: 7,
        };
        generate_dataset(&p, &LabelCaps::default()).unwrap().samples
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            dropout: 0.0,
            readout_hidden: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn one_small_step_decreases_batch_loss() {
        let samples = tiny_corpus();
        let idx: Vec<usize> = (0..4).collect();
        for task in [Task::Spp, Task::Ttdp] {
            let mut model = FuncGnn::init(tiny_model(), 3).unwrap();
            let cfg = TrainConfig {
                lr: 1e-4,
                weight_decay: 0.0,
                task,
                ..TrainConfig::default()
            };
            let mut tape = Tape::new();
            let (loss, vars) = batch_loss(&model, &mut tape, &samples, &idx, task, Mode::EVAL).unwrap();
            let before = tape.value(loss).data()[0];
            tape.backward(loss).unwrap();
            let mut st = AdamState::for_model(&model);
            model_adam_step(&mut model, &tape, &vars, &mut st, &cfg).unwrap();
            let mut tape = Tape::new();
            let (loss, _) = batch_loss(&model, &mut tape, &samples, &idx, task, Mode::EVAL).unwrap();
            let after = tape.value(loss).data()[0];
            assert!(after < before, "{task}: {after} !< {before}");
        }
    }

    #[test]
    fn eval_metric_matches_loss_bitwise() {
        let samples = tiny_corpus();
        let model = FuncGnn::init(tiny_model(), 3).unwrap();
        let idx: Vec<usize> = (0..5).collect();
        for task in [Task::Spp, Task::Ttdp] {
            let mut tape = Tape::new();
            let (loss, _) = batch_loss(&model, &mut tape, &samples, &idx, task, Mode::EVAL).unwrap();
            let metric = evaluate(&model, &samples, &idx, task, 128).unwrap();
            assert_eq!(tape.value(loss).data()[0], metric, "{task}");
        }
    }

    #[test]
    fn ttdp_invariant_under_affine_labels() {
        let samples = tiny_corpus();
        let model = FuncGnn::init(tiny_model(), 3).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let (_, z) = predict_all(&model, &samples, &idx, 128).unwrap();
        let pairs = batch_pairs(&samples, &idx);
        let base = ttdp_loss(&z, &pairs).unwrap();
        for (a, b) in [(3.0, 0.5), (0.01, -2.0), (250.0, 7.0)] {
            let scaled: Vec<IndexedPair> = pairs.iter().map(|&(i, j, d)| (i, j, a * d + b)).collect();
            assert!((ttdp_loss(&z, &scaled).unwrap() - base).abs() <= 1e-9);
        }
    }

    #[test]
    fn early_stopping_and_best_checkpoint() {
        let samples = tiny_corpus();
        let split = split_dataset(samples.len(), [0.5, 0.25, 0.25], 2).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            max_epochs: 40,
            patience: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&samples, &split, &tiny_model(), &cfg).unwrap();
        let last = out.records.last().unwrap().epoch;
        assert!(last - out.best_epoch <= cfg.patience);
        assert!(out.records.iter().all(|r| out.best_val <= r.val_metric));
        assert!(out.records.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
        let again = evaluate(&out.model, &samples, &split.val, Task::Spp, 4).unwrap();
        assert_eq!(again, out.best_val);
        let tr = evaluate(&out.model, &samples, &split.train, Task::Spp, 4).unwrap();
        assert_eq!(tr, out.train_metric);
    }

    #[test]
    fn patience_one_stops_after_first_miss() {
        let samples = tiny_corpus();
        let split = split_dataset(samples.len(), [0.5, 0.25, 0.25], 2).unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            max_epochs: 30,
            patience: 1,
            ..TrainConfig::default()
        };
        let out = train(&samples, &split, &tiny_model(), &cfg).unwrap();
        let mut best = f64::INFINITY;
        let mut stop = cfg.max_epochs;
        for r in &out.records {
            if r.val_metric >= best {
                stop = r.epoch;
                break;
            }
            best = r.val_metric;
        }
        assert_eq!(out.records.last().unwrap().epoch, stop);
    }

    #[test]
    fn empty_splits_rejected() {
        let samples = tiny_corpus();
        let split = Split {
            train: vec![0],
            val: vec![],
            test: vec![],
        };
        assert!(matches!(
            train(&samples, &split, &tiny_model(), &TrainConfig::default()),
            Err(TrainError::EmptySplit(_))
        ));
    }

    #[test]
    fn constant_baseline_matches_direct_computation() {
        let samples = tiny_corpus();
        let idx: Vec<usize> = vec![1, 3, 5];
        let mut sum = 0.0;
        let mut n = 0;
        for &i in &idx {
            for &y in &samples[i].probs {
                sum += (y - 0.5f64).abs();
                n += 1;
            }
        }
        let got = constant_spp_mae(&samples, &idx, 0.5).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_never_move() {
        let samples = tiny_corpus();
        let split = split_dataset(samples.len(), [0.5, 0.25, 0.25], 2).unwrap();
        let mut mc = tiny_model();
        mc.arm = Arm::SimpleGraphnorm;
        let cfg = TrainConfig {
            max_epochs: 3,
            patience: 3,
            ..TrainConfig::default()
        };
        let out = train(&samples, &split, &mc, &cfg).unwrap();
        for p in out.model.params().iter().filter(|p| p.frozen) {
            assert!(p.value.data().iter().all(|&x| x == 0.0), "{}", p.name);
        }
    }
}
