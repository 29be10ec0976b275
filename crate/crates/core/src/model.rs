// SPDX-License-Identifier: Apache-2.0

//! The FuncGNN network: input projection, `L` hybrid stages (signed-mean
//! SAGE aggregation with ratio-conditioned graph normalization, then a GIN
//! update), dense fusion of all stage outputs, and an MLP readout.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aig::NODE_FEATURE_DIM;
use crate::autodiff::{Segments, Tape, Tensor, TensorError, Var};
use crate::batch::{GraphBatch, RatioScaler};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{ratios} ratio rows for {graphs} graphs")]
    SegmentMismatch { ratios: usize, graphs: usize },
    #[error("batch has {got} feature columns, model expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    #[default]
    Full,
    NoHybridGcn,
    NoCondnorm,
    NoDense,
    SimpleGraphnorm,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::Full,
        Arm::NoHybridGcn,
        Arm::NoCondnorm,
        Arm::NoDense,
        Arm::SimpleGraphnorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoHybridGcn => "no_hybrid_gcn",
            Arm::NoCondnorm => "no_condnorm",
            Arm::NoDense => "no_dense",
            Arm::SimpleGraphnorm => "simple_graphnorm",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Arm::Full => "complete model",
            Arm::NoHybridGcn => {
                "each SAGE and GIN layer replaced by an unsigned symmetric-normalized GCN layer"
            }
            Arm::NoCondnorm => "no graph normalization",
            Arm::NoDense => "only the last stage feeds the fusion layer",
            Arm::SimpleGraphnorm => "ratio conditioning weights zeroed and frozen",
        }
    }

    pub fn parse(name: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of SAGE+GIN stages.
    #[serde(rename = "L")]
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub d_in: usize,
    pub readout_hidden: usize,
    pub readout_depth: usize,
    pub arm: Arm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 3,
            hidden: 256,
            dropout: 0.1,
            d_in: NODE_FEATURE_DIM,
            readout_hidden: 256,
            readout_depth: 2,
            arm: Arm::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.layers < 1 {
            return bad("L must be at least 1");
        }
        if self.hidden < 1 || self.readout_hidden < 1 || self.d_in < 1 {
            return bad("hidden, readout_hidden and d_in must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters enter the tape as constants and are never updated.
    pub frozen: bool,
}

/// Named parameters in a fixed, config-determined order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    /// Total scalar count, frozen entries included.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gamma0: usize,
    beta0: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
    norm: Option<NormIdx>,
}

#[derive(Debug, Clone, Copy)]
struct GinIdx {
    eps: usize,
    w3: usize,
    b3: usize,
    w4: usize,
    b4: usize,
}

#[derive(Debug, Clone, Copy)]
enum StageIdx {
    Hybrid { sage: ConvIdx, gin: GinIdx },
    Gcn([ConvIdx; 2]),
}

#[derive(Debug, Clone, Copy)]
struct ReadoutIdx {
    w: usize,
    b: usize,
    ln_gamma: usize,
    ln_beta: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    input_w: usize,
    stages: Vec<StageIdx>,
    fuse_w: usize,
    fuse_b: usize,
    readout: Vec<ReadoutIdx>,
    head_w: usize,
    head_b: usize,
}

enum Init {
    Uniform,
    Zeros,
    Ones,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init, frozen: bool) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform => {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n)
                    .map(|_| self.rng.random_range(-bound..bound))
                    .collect()
            }
        };
        self.store.params.push(Param {
            name,
            value: Tensor::new(shape.to_vec(), data).expect("shape matches data"),
            frozen,
        });
        self.store.params.len() - 1
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.add(name, &[rows, cols], Init::Uniform, false)
    }

    fn bias(&mut self, name: String, n: usize) -> usize {
        self.add(name, &[n], Init::Zeros, false)
    }

    fn norm(&mut self, prefix: &str, h: usize, arm: Arm) -> Option<NormIdx> {
        if arm == Arm::NoCondnorm {
            return None;
        }
        let frozen = arm == Arm::SimpleGraphnorm;
        let dyn_w = if frozen { Init::Zeros } else { Init::Uniform };
        let gamma0 = self.add(format!("{prefix}.gamma0"), &[h], Init::Ones, false);
        let beta0 = self.add(format!("{prefix}.beta0"), &[h], Init::Zeros, false);
        let w1 = self.add(format!("{prefix}.w1"), &[1, h], dyn_w, frozen);
        let b1 = self.add(format!("{prefix}.b1"), &[h], Init::Zeros, frozen);
        let dyn_w = if frozen { Init::Zeros } else { Init::Uniform };
        let w2 = self.add(format!("{prefix}.w2"), &[1, h], dyn_w, frozen);
        let b2 = self.add(format!("{prefix}.b2"), &[h], Init::Zeros, frozen);
        Some(NormIdx {
            gamma0,
            beta0,
            w1,
            b1,
            w2,
            b2,
        })
    }

    fn conv(&mut self, prefix: &str, h: usize, arm: Arm) -> ConvIdx {
        ConvIdx {
            w: self.weight(format!("{prefix}.w"), h, h),
            b: self.bias(format!("{prefix}.b"), h),
            norm: self.norm(&format!("{prefix}.norm"), h, arm),
        }
    }
}

fn build(config: &ModelConfig, seed: u64) -> (ParamStore, Layout) {
    let mut b = Builder {
        store: ParamStore::default(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let h = config.hidden;
    let input_w = b.weight("input.w".into(), config.d_in, h);
    let mut stages = Vec::with_capacity(config.layers);
    for k in 0..config.layers {
        let stage = if config.arm == Arm::NoHybridGcn {
            StageIdx::Gcn([
                b.conv(&format!("stage{k}.gcn0"), h, config.arm),
                b.conv(&format!("stage{k}.gcn1"), h, config.arm),
            ])
        } else {
            let sage = b.conv(&format!("stage{k}.sage"), h, config.arm);
            let gin = GinIdx {
                eps: b.add(format!("stage{k}.gin.eps"), &[1], Init::Zeros, false),
                w3: b.weight(format!("stage{k}.gin.w3"), h, h),
                b3: b.bias(format!("stage{k}.gin.b3"), h),
                w4: b.weight(format!("stage{k}.gin.w4"), h, h),
                b4: b.bias(format!("stage{k}.gin.b4"), h),
            };
            StageIdx::Hybrid { sage, gin }
        };
        stages.push(stage);
    }
    let fuse_in = if config.arm == Arm::NoDense {
        h
    } else {
        h * config.layers
    };
    let fuse_w = b.weight("fuse.w".into(), fuse_in, h);
    let fuse_b = b.bias("fuse.b".into(), h);
    let mut readout = Vec::with_capacity(config.readout_depth);
    let mut width = h;
    for k in 0..config.readout_depth {
        let rh = config.readout_hidden;
        readout.push(ReadoutIdx {
            w: b.weight(format!("readout{k}.w"), width, rh),
            b: b.bias(format!("readout{k}.b"), rh),
            ln_gamma: b.add(format!("readout{k}.ln_gamma"), &[rh], Init::Ones, false),
            ln_beta: b.add(format!("readout{k}.ln_beta"), &[rh], Init::Zeros, false),
        });
        width = rh;
    }
    let head_w = b.weight("head.w".into(), width, 1);
    let head_b = b.bias("head.b".into(), 1);
    let layout = Layout {
        input_w,
        stages,
        fuse_w,
        fuse_b,
        readout,
        head_w,
        head_b,
    };
    (b.store, layout)
}

/// Whether dropout is active, and the seed its masks derive from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub seed: u64,
}

impl Mode {
    pub const EVAL: Mode = Mode {
        training: false,
        seed: 0,
    };

    pub fn train(seed: u64) -> Self {
        Mode {
            training: true,
            seed,
        }
    }
}

/// Hands out a distinct mask seed to every dropout site of one forward pass.
pub struct Dropper {
    rate: f64,
    mode: Mode,
    calls: u64,
}

impl Dropper {
    pub fn new(rate: f64, mode: Mode) -> Self {
        Dropper {
            rate,
            mode,
            calls: 0,
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        self.calls += 1;
        let seed = self.mode.seed ^ self.calls.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        tape.dropout(x, self.rate, self.mode.training, seed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma0: Var,
    pub beta0: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
    pub norm: Option<NormVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct GinVars {
    pub eps: Var,
    pub w3: Var,
    pub b3: Var,
    pub w4: Var,
    pub b4: Var,
}

fn check_ratios(tape: &Tape, ratio: Var, segments: &Segments) -> Result<(), ModelError> {
    let rows = tape.value(ratio).rows();
    if rows != segments.num_graphs() || tape.value(ratio).cols() != 1 {
        return Err(ModelError::SegmentMismatch {
            ratios: tape.value(ratio).len(),
            graphs: segments.num_graphs(),
        });
    }
    Ok(())
}

/// Per-graph standardization, then scale and shift by
/// `gamma = gamma0 + (W1 r + b1) * gamma0` and
/// `beta = beta0 + (W2 r + b2) * beta0`, using each graph's own `r`.
pub fn cond_graph_norm(
    tape: &mut Tape,
    h: Var,
    segments: &Arc<Segments>,
    ratio: Var,
    p: &NormVars,
) -> Result<Var, ModelError> {
    check_ratios(tape, ratio, segments)?;
    let xhat = tape.graph_standardize(h, segments)?;
    let graph_of_row: Arc<[usize]> = segments.graph_of_row().into();

    let a = tape.linear(ratio, p.w1, Some(p.b1))?;
    let gamma_dyn = tape.mul_row(a, p.gamma0)?;
    let gamma = tape.add_row(gamma_dyn, p.gamma0)?;
    let c = tape.linear(ratio, p.w2, Some(p.b2))?;
    let beta_dyn = tape.mul_row(c, p.beta0)?;
    let beta = tape.add_row(beta_dyn, p.beta0)?;

    let gamma_rows = tape.gather_rows(gamma, Arc::clone(&graph_of_row))?;
    let beta_rows = tape.gather_rows(beta, graph_of_row)?;
    let scaled = tape.mul(xhat, gamma_rows)?;
    Ok(tape.add(scaled, beta_rows)?)
}

/// Per-graph standardization with a fixed scale and shift.
pub fn plain_graph_norm(
    tape: &mut Tape,
    h: Var,
    segments: &Arc<Segments>,
    gamma: Var,
    beta: Var,
) -> Result<Var, ModelError> {
    let xhat = tape.graph_standardize(h, segments)?;
    let scaled = tape.mul_row(xhat, gamma)?;
    Ok(tape.add_row(scaled, beta)?)
}

fn norm_act_drop(
    tape: &mut Tape,
    x: Var,
    batch: &GraphBatch,
    ratio: Var,
    norm: Option<&NormVars>,
    dropper: &mut Dropper,
) -> Result<Var, ModelError> {
    let x = match norm {
        Some(p) => cond_graph_norm(tape, x, &batch.segments, ratio, p)?,
        None => x,
    };
    let x = tape.gelu(x);
    Ok(dropper.apply(tape, x)?)
}

/// `t = hW + b`; `a = t + signed_mean(t)` over the self-loop-augmented
/// edges; then normalization, GELU and dropout.
pub fn sage_stage(
    tape: &mut Tape,
    h: Var,
    batch: &GraphBatch,
    p: &ConvVars,
    ratio: Var,
    dropper: &mut Dropper,
) -> Result<Var, ModelError> {
    let t = tape.linear(h, p.w, Some(p.b))?;
    let agg = tape.edge_scatter(t, &batch.edges, Arc::clone(&batch.signed_mean_coeffs))?;
    let x = tape.add(t, agg)?;
    norm_act_drop(tape, x, batch, ratio, p.norm.as_ref(), dropper)
}

/// `MLP((1 + eps) h + sum of h over incoming edges)` with
/// `MLP(x) = relu(x W3 + b3) W4 + b4`; edge signs are ignored.
pub fn gin_stage(
    tape: &mut Tape,
    h: Var,
    batch: &GraphBatch,
    p: &GinVars,
) -> Result<Var, ModelError> {
    let eh = tape.scale(h, p.eps)?;
    let self_term = tape.add(h, eh)?;
    let neigh = tape.scatter_sum(h, &batch.edges)?;
    let x = tape.add(self_term, neigh)?;
    let u = tape.linear(x, p.w3, Some(p.b3))?;
    let u = tape.relu(u);
    Ok(tape.linear(u, p.w4, Some(p.b4))?)
}

/// Symmetric-normalized convolution `sum_j t_j / sqrt(deg_j deg_v)` of
/// `t = hW + b`, then normalization, GELU and dropout.
pub fn gcn_stage(
    tape: &mut Tape,
    h: Var,
    batch: &GraphBatch,
    p: &ConvVars,
    ratio: Var,
    dropper: &mut Dropper,
) -> Result<Var, ModelError> {
    let t = tape.linear(h, p.w, Some(p.b))?;
    let x = tape.edge_scatter(t, &batch.edges, Arc::clone(&batch.sym_norm_coeffs))?;
    norm_act_drop(tape, x, batch, ratio, p.norm.as_ref(), dropper)
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// One entry per parameter, in store order.
    pub params: Vec<Var>,
    /// `N x hidden` fused node embeddings.
    pub embeddings: Var,
    /// `N x 1` signal probabilities.
    pub spp: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub embeddings: Tensor,
    pub spp: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FuncGnn {
    config: ModelConfig,
    params: ParamStore,
    scaler: RatioScaler,
    layout: Layout,
}

impl FuncGnn {
    /// Fresh parameters: weights uniform in `+-1/sqrt(fan_in)`, biases and
    /// `beta0` zero, `gamma0` one, GIN `eps` zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (params, layout) = build(&config, seed);
        Ok(FuncGnn {
            config,
            params,
            scaler: RatioScaler::default(),
            layout,
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match
    /// the layout implied by `config` exactly.
    pub fn from_parts(
        config: ModelConfig,
        scaler: RatioScaler,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let mut model = Self::init(config, 0)?;
        model.scaler = scaler;
        if tensors.len() != model.params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} stored tensors, config needs {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (p, (name, value)) in model.params.params.iter_mut().zip(tensors) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "stored tensor {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn scaler(&self) -> &RatioScaler {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: RatioScaler) {
        self.scaler = scaler;
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        mode: Mode,
    ) -> Result<ForwardVars, ModelError> {
        if batch.features.cols() != self.config.d_in {
            return Err(ModelError::FeatureWidth {
                expected: self.config.d_in,
                got: batch.features.cols(),
            });
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if p.frozen {
                    tape.constant(p.value.clone())
                } else {
                    tape.param(p.value.clone())
                }
            })
            .collect();
        let v = |i: usize| params[i];
        let norm_vars = |n: &NormIdx| NormVars {
            gamma0: v(n.gamma0),
            beta0: v(n.beta0),
            w1: v(n.w1),
            b1: v(n.b1),
            w2: v(n.w2),
            b2: v(n.b2),
        };
        let conv_vars = |c: &ConvIdx| ConvVars {
            w: v(c.w),
            b: v(c.b),
            norm: c.norm.as_ref().map(norm_vars),
        };

        let mut dropper = Dropper::new(self.config.dropout, mode);
        let x = tape.constant(batch.features.clone());
        let ratio = tape.constant(batch.ratios.clone());
        let mut h = tape.linear(x, v(self.layout.input_w), None)?;
        let mut stage_outputs = Vec::with_capacity(self.layout.stages.len());
        for stage in &self.layout.stages {
            h = match stage {
                StageIdx::Hybrid { sage, gin } => {
                    let s = sage_stage(tape, h, batch, &conv_vars(sage), ratio, &mut dropper)?;
                    let g = GinVars {
                        eps: v(gin.eps),
                        w3: v(gin.w3),
                        b3: v(gin.b3),
                        w4: v(gin.w4),
                        b4: v(gin.b4),
                    };
                    gin_stage(tape, s, batch, &g)?
                }
                StageIdx::Gcn(convs) => {
                    let a = gcn_stage(tape, h, batch, &conv_vars(&convs[0]), ratio, &mut dropper)?;
                    gcn_stage(tape, a, batch, &conv_vars(&convs[1]), ratio, &mut dropper)?
                }
            };
            stage_outputs.push(h);
        }
        let fused_in = if self.config.arm == Arm::NoDense {
            h
        } else {
            tape.concat_cols(&stage_outputs)?
        };
        let z = tape.linear(fused_in, v(self.layout.fuse_w), Some(v(self.layout.fuse_b)))?;

        let mut y = z;
        for r in &self.layout.readout {
            let a = tape.linear(y, v(r.w), Some(v(r.b)))?;
            let a = tape.layer_norm(a, v(r.ln_gamma), v(r.ln_beta))?;
            let a = tape.gelu(a);
            y = dropper.apply(tape, a)?;
        }
        let logit = tape.linear(y, v(self.layout.head_w), Some(v(self.layout.head_b)))?;
        let spp = tape.sigmoid(logit);
        Ok(ForwardVars {
            params,
            embeddings: z,
            spp,
        })
    }

    /// Evaluation-mode forward on a fresh tape.
    pub fn predict(&self, batch: &GraphBatch) -> Result<ForwardOutput, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, Mode::EVAL)?;
        Ok(ForwardOutput {
            embeddings: tape.value(out.embeddings).clone(),
            spp: tape.value(out.spp).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aig::{random_aig, to_graph_tensors, Aig, Fanin, GraphTensors};

    fn small(arm: Arm) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            dropout: 0.0,
            readout_hidden: 8,
            arm,
            ..ModelConfig::default()
        }
    }

    fn batch_of(gs: &[&GraphTensors]) -> GraphBatch {
        GraphBatch::new(gs, &RatioScaler::default()).unwrap()
    }

    fn var_of(t: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        t.param(Tensor::matrix(rows, cols, data).unwrap())
    }

    // One graph with a self-loop per node and the given extra edges.
    fn fixture(n: usize, edges: &[(usize, usize, f64)]) -> GraphBatch {
        let mut g = GraphTensors {
            num_nodes: n,
            features: vec![0.0; n * NODE_FEATURE_DIM],
            edge_src: edges.iter().map(|e| e.0).collect(),
            edge_dst: edges.iter().map(|e| e.1).collect(),
            edge_sign: edges.iter().map(|e| e.2).collect(),
            gate_ratio: 1.0,
        };
        for v in 0..n {
            g.edge_src.push(v);
            g.edge_dst.push(v);
            g.edge_sign.push(1.0);
        }
        batch_of(&[&g])
    }

    fn identity(n: usize) -> Vec<f64> {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        d
    }

    #[test]
    fn parameter_count_default_config() {
        let h = 256usize;
        let stage = 3 * h * h + 9 * h + 1;
        let expected = 2 * h + 3 * stage + (3 * h * h + h) + 2 * (h * h + 3 * h) + (h + 1);
        let model = FuncGnn::init(ModelConfig::default(), 0).unwrap();
        assert_eq!(model.params().num_scalars(), expected);
        assert_eq!(model.params().num_scalars(), 926_980);
    }

    #[test]
    fn init_is_seeded_and_conventional() {
        let a = FuncGnn::init(small(Arm::Full), 5).unwrap();
        let b = FuncGnn::init(small(Arm::Full), 5).unwrap();
        let c = FuncGnn::init(small(Arm::Full), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let g = a.params().get("stage0.sage.norm.gamma0").unwrap();
        assert!(g.value.data().iter().all(|&x| x == 1.0));
        let w = a.params().get("stage1.gin.w3").unwrap();
        let bound = 1.0 / 8f64.sqrt();
        assert!(w.value.data().iter().all(|x| x.abs() <= bound));
        assert_eq!(a.params().get("stage0.gin.eps").unwrap().value.data(), &[0.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = small(Arm::Full);
        c.layers = 0;
        assert!(FuncGnn::init(c, 0).is_err());
        let mut c = small(Arm::Full);
        c.dropout = 1.0;
        assert!(FuncGnn::init(c, 0).is_err());
    }

    #[test]
    fn arm_layouts() {
        let full = FuncGnn::init(small(Arm::Full), 0).unwrap();
        let nodense = FuncGnn::init(small(Arm::NoDense), 0).unwrap();
        assert_eq!(full.params().get("fuse.w").unwrap().value.shape(), &[16, 8]);
        assert_eq!(nodense.params().get("fuse.w").unwrap().value.shape(), &[8, 8]);
        let nonorm = FuncGnn::init(small(Arm::NoCondnorm), 0).unwrap();
        assert!(nonorm.params().iter().all(|p| !p.name.contains("norm.")));
        let simple = FuncGnn::init(small(Arm::SimpleGraphnorm), 0).unwrap();
        let w1 = simple.params().get("stage0.sage.norm.w1").unwrap();
        assert!(w1.frozen && w1.value.data().iter().all(|&x| x == 0.0));
        let gcn = FuncGnn::init(small(Arm::NoHybridGcn), 0).unwrap();
        assert!(gcn.params().get("stage1.gcn1.w").is_some());
        assert!(gcn.params().iter().all(|p| !p.name.contains("gin")));
        assert_eq!(Arm::parse("no_dense"), Some(Arm::NoDense));
        assert_eq!(Arm::parse("bogus"), None);
    }

    #[test]
    fn sage_zero_weights_give_zero_output() {
        let batch = fixture(3, &[(0, 2, 1.0), (1, 2, -1.0)]);
        let mut t = Tape::new();
        let h = var_of(&mut t, 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = var_of(&mut t, 2, 2, vec![0.0; 4]);
        let b = t.param(Tensor::vector(vec![0.0; 2]));
        let norm = NormVars {
            gamma0: t.param(Tensor::vector(vec![1.0; 2])),
            beta0: t.param(Tensor::vector(vec![0.0; 2])),
            w1: var_of(&mut t, 1, 2, vec![0.0; 2]),
            b1: t.param(Tensor::vector(vec![0.0; 2])),
            w2: var_of(&mut t, 1, 2, vec![0.0; 2]),
            b2: t.param(Tensor::vector(vec![0.0; 2])),
        };
        let ratio = t.constant(batch.ratios.clone());
        let p = ConvVars { w, b, norm: Some(norm) };
        let out = sage_stage(&mut t, h, &batch, &p, ratio, &mut Dropper::new(0.0, Mode::EVAL))
            .unwrap();
        assert!(t.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sage_message_table() {
        // Inputs 0, 1; AND 2 = 0 & !1; AND 3 = !2 & 1. Identity weights, no
        // norm, so the pre-activation is t_v + mean_{j -> v} s_j t_j with a
        // self-loop in every mean.
        let batch = fixture(4, &[(0, 2, 1.0), (1, 2, -1.0), (2, 3, -1.0), (1, 3, 1.0)]);
        let mut t = Tape::new();
        let h = var_of(&mut t, 4, 1, vec![1.0, 2.0, 3.0, 6.0]);
        let w = var_of(&mut t, 1, 1, vec![1.0]);
        let b = t.param(Tensor::vector(vec![0.0]));
        let ratio = t.constant(batch.ratios.clone());
        let p = ConvVars { w, b, norm: None };
        let out = sage_stage(&mut t, h, &batch, &p, ratio, &mut Dropper::new(0.0, Mode::EVAL))
            .unwrap();
        // node 0: 1 + 1/1 = 2; node 1: 2 + 2 = 4;
        // node 2: 3 + (1 - 2 + 3)/3 = 11/3; node 3: 6 + (-3 + 2 + 6)/3 = 23/3
        let expected_pre = [2.0, 4.0, 11.0 / 3.0, 23.0 / 3.0];
        for (got, pre) in t.value(out).data().iter().zip(expected_pre) {
            let want = crate::autodiff::gelu_scalar(pre);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn sage_isolated_node_sees_itself() {
        let batch = fixture(1, &[]);
        let mut t = Tape::new();
        let h = var_of(&mut t, 1, 1, vec![0.7]);
        let w = var_of(&mut t, 1, 1, vec![1.0]);
        let b = t.param(Tensor::vector(vec![0.0]));
        let agg = t.linear(h, w, Some(b)).unwrap();
        let agg = t.signed_scatter_mean(agg, &batch.edges).unwrap();
        assert_eq!(t.value(agg).data(), &[0.7]);
    }

    #[test]
    fn gin_self_loop_bookkeeping() {
        let batch = fixture(1, &[]);
        let mut t = Tape::new();
        let h = var_of(&mut t, 1, 2, vec![0.5, 1.5]);
        let p = GinVars {
            eps: t.param(Tensor::vector(vec![0.0])),
            w3: var_of(&mut t, 2, 2, identity(2)),
            b3: t.param(Tensor::vector(vec![0.0; 2])),
            w4: var_of(&mut t, 2, 2, identity(2)),
            b4: t.param(Tensor::vector(vec![0.0; 2])),
        };
        let out = gin_stage(&mut t, h, &batch, &p).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 3.0]);
    }

    #[test]
    fn gin_zero_mlp_is_constant() {
        let batch = fixture(3, &[(0, 2, -1.0), (1, 2, 1.0)]);
        let mut t = Tape::new();
        let h = var_of(&mut t, 3, 2, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let p = GinVars {
            eps: t.param(Tensor::vector(vec![0.3])),
            w3: var_of(&mut t, 2, 2, vec![0.0; 4]),
            b3: t.param(Tensor::vector(vec![0.0; 2])),
            w4: var_of(&mut t, 2, 2, vec![0.0; 4]),
            b4: t.param(Tensor::vector(vec![0.25, -4.0])),
        };
        let out = gin_stage(&mut t, h, &batch, &p).unwrap();
        for row in t.value(out).data().chunks(2) {
            assert_eq!(row, &[0.25, -4.0]);
        }
    }

    fn two_graph_norm_setup(t: &mut Tape, w1: f64) -> (Var, Arc<Segments>, Var, NormVars) {
        let seg = Arc::new(Segments::from_sizes(&[2, 3]));
        let h = t.param(Tensor::matrix(5, 2, vec![0.0, 1.0, 2.0, 1.0, 1.0, 4.0, 2.0, 4.0, 3.0, 4.0]).unwrap());
        let ratio = t.constant(Tensor::matrix(2, 1, vec![-1.0, 2.0]).unwrap());
        let p = NormVars {
            gamma0: t.param(Tensor::vector(vec![2.0, 0.5])),
            beta0: t.param(Tensor::vector(vec![0.1, -0.3])),
            w1: t.param(Tensor::matrix(1, 2, vec![w1, w1]).unwrap()),
            b1: t.param(Tensor::vector(vec![0.0, 0.0])),
            w2: t.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()),
            b2: t.param(Tensor::vector(vec![0.0, 0.0])),
        };
        (h, seg, ratio, p)
    }

    #[test]
    fn cond_norm_reduces_to_plain() {
        let mut t = Tape::new();
        let (h, seg, ratio, p) = two_graph_norm_setup(&mut t, 0.0);
        let a = cond_graph_norm(&mut t, h, &seg, ratio, &p).unwrap();
        let b = plain_graph_norm(&mut t, h, &seg, p.gamma0, p.beta0).unwrap();
        assert_eq!(t.value(a).data(), t.value(b).data());
        // the second column of graph 1 is constant, so it equals beta
        for r in 2..5 {
            assert_eq!(t.value(a).data()[r * 2 + 1], -0.3);
        }
    }

    #[test]
    fn cond_norm_uses_each_graph_ratio() {
        let mut t = Tape::new();
        let (h, seg, ratio, p) = two_graph_norm_setup(&mut t, 0.5);
        let out = cond_graph_norm(&mut t, h, &seg, ratio, &p).unwrap();
        let v = t.value(out).data();
        // graph 0 column 0 standardizes to about [-1, 1]; gamma = 2 (1 - 0.5)
        assert!((v[2] - 0.1 - 1.0).abs() < 1e-4);
        // graph 1 column 0 is [1, 2, 3]; gamma = 2 (1 + 1)
        let hi = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert!((v[8] - 0.1 - 4.0 * hi).abs() < 1e-9);

        let bad = t.constant(Tensor::matrix(3, 1, vec![0.0; 3]).unwrap());
        assert!(matches!(
            cond_graph_norm(&mut t, h, &seg, bad, &p),
            Err(ModelError::SegmentMismatch { .. })
        ));
    }

    #[test]
    fn forward_shapes_and_range() {
        for arm in Arm::ALL {
            let model = FuncGnn::init(small(arm), 1).unwrap();
            let g1 = to_graph_tensors(&random_aig(3, 4, 20, 0.3).unwrap(), true);
            let g2 = to_graph_tensors(&random_aig(4, 5, 10, 0.3).unwrap(), true);
            let out = model.predict(&batch_of(&[&g1, &g2])).unwrap();
            assert_eq!(out.embeddings.shape(), &[39, 8]);
            assert_eq!(out.spp.len(), 39);
            assert!(out.spp.iter().all(|&p| p > 0.0 && p < 1.0), "{arm}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_batch_local() {
        let model = FuncGnn::init(small(Arm::Full), 2).unwrap();
        let g1 = to_graph_tensors(&random_aig(3, 4, 20, 0.3).unwrap(), true);
        let g2 = to_graph_tensors(&random_aig(4, 5, 10, 0.3).unwrap(), true);
        let both = model.predict(&batch_of(&[&g1, &g2])).unwrap();
        let again = model.predict(&batch_of(&[&g1, &g2])).unwrap();
        assert_eq!(both, again);
        let alone = model.predict(&batch_of(&[&g2])).unwrap();
        for (a, b) in both.spp[24..].iter().zip(&alone.spp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn training_mode_dropout_is_seeded() {
        let mut cfg = small(Arm::Full);
        cfg.dropout = 0.3;
        let model = FuncGnn::init(cfg, 2).unwrap();
        let g = to_graph_tensors(&random_aig(3, 4, 20, 0.3).unwrap(), true);
        let batch = batch_of(&[&g]);
        let run = |seed| {
            let mut t = Tape::new();
            let out = model.forward(&mut t, &batch, Mode::train(seed)).unwrap();
            t.value(out.spp).data().to_vec()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
        assert_ne!(run(9), model.predict(&batch).unwrap().spp);
    }

    #[test]
    fn ratio_changes_embeddings() {
        let model = FuncGnn::init(small(Arm::Full), 3).unwrap();
        let g = to_graph_tensors(&random_aig(5, 4, 15, 0.3).unwrap(), true);
        let a = model.predict(&batch_of(&[&g]).with_ratios(&[-1.0]).unwrap()).unwrap();
        let b = model.predict(&batch_of(&[&g]).with_ratios(&[1.0]).unwrap()).unwrap();
        let diff = a
            .embeddings
            .data()
            .iter()
            .zip(b.embeddings.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "{diff}");

        let simple = FuncGnn::init(small(Arm::SimpleGraphnorm), 3).unwrap();
        let a = simple.predict(&batch_of(&[&g]).with_ratios(&[-1.0]).unwrap()).unwrap();
        let b = simple.predict(&batch_of(&[&g]).with_ratios(&[1.0]).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_width_checked() {
        let mut cfg = small(Arm::Full);
        cfg.d_in = 3;
        let model = FuncGnn::init(cfg, 0).unwrap();
        let g = to_graph_tensors(&random_aig(5, 4, 15, 0.3).unwrap(), true);
        assert!(matches!(
            model.predict(&batch_of(&[&g])),
            Err(ModelError::FeatureWidth { .. })
        ));
    }

    #[test]
    fn receptive_field_is_two_hops_per_stage() {
        // Path a -> n1 -> n2 -> ... built from ANDs of the previous node and a
        // fixed input, so hop distance from input 0 grows by one per gate.
        let ands: Vec<[Fanin; 2]> = (0..10)
            .map(|k| {
                let prev = if k == 0 { 0 } else { k + 1 };
                [Fanin::new(prev, k % 2 == 1), Fanin::new(1, false)]
            })
            .collect();
        let aig = Aig::new(2, ands, vec![Fanin::new(11, false)]).unwrap();
        let g = to_graph_tensors(&aig, true);
        let mut cfg = small(Arm::NoCondnorm);
        cfg.layers = 2;
        let model = FuncGnn::init(cfg, 4).unwrap();
        let base = model.predict(&batch_of(&[&g])).unwrap();
        let mut bumped = g.clone();
        bumped.features[0] += 0.5;
        let moved = model.predict(&batch_of(&[&bumped])).unwrap();
        // node 2 + k is k + 1 hops from input 0; input 1 is adjacent to
        // every gate, so only look at edges along the path.
        for k in 0..10 {
            let hops = k + 1;
            let changed = (base.spp[2 + k] - moved.spp[2 + k]).abs() > 0.0;
            if hops > 4 {
                assert!(!changed, "node {} at {hops} hops changed", 2 + k);
            }
        }
        assert_ne!(base.spp[2], moved.spp[2]);
    }
}
