// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference checks of every tape primitive and of the
//! composed model.
//!
//! Each check reduces the op output to a scalar with a fixed random weight
//! tensor, takes the reverse-mode gradient of every input, and compares it
//! entry by entry with `(f(x + eps) - f(x - eps)) / 2 eps`. The error of one
//! entry is `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
//! The floor keeps entries whose true gradient is zero from dividing
//! roundoff by roundoff; at `eps = 1e-5` the roundoff of a difference
//! quotient of an O(10) loss is about 1e-10, far below `REL_FLOOR * REL_TOL`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aig::{random_aig, to_graph_tensors};
use crate::autodiff::{gelu_scalar, Tape, Tensor, Var};
use crate::batch::{GraphBatch, RatioScaler};
use crate::model::{
    cond_graph_norm, gcn_stage, gin_stage, sage_stage, Arm, ConvVars, Dropper, FuncGnn, GinVars,
    Mode, ModelConfig, ModelError, NormVars,
};

pub const FD_EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of scalar gradient entries compared.
    pub entries: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= REL_TOL
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("consistent shape")
}

type BuildFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, ModelError> + 'a;

fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, ModelError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Compares reverse-mode and finite-difference gradients of
/// `sum(build(inputs) * W)` with respect to every input.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: &BuildFn<'_>,
    seed: u64,
) -> Result<CheckResult, ModelError> {
    let eval = |values: &[Tensor], weights: Option<&Tensor>| -> Result<(Tape, Vec<Var>, Var), ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = match weights {
            Some(w) => project(&mut tape, out, w)?,
            None => out,
        };
        Ok((tape, vars, loss))
    };
    let (probe, _, out) = eval(inputs, None)?;
    let shape = probe.value(out).shape().to_vec();
    let weights = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);

    let (mut tape, vars, loss) = eval(inputs, Some(&weights))?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + FD_EPS;
            let (t, _, l) = eval(&work, Some(&weights))?;
            let plus = t.value(l).data()[0];
            work[i].data_mut()[k] = orig - FD_EPS;
            let (t, _, l) = eval(&work, Some(&weights))?;
            let minus = t.value(l).data()[0];
            work[i].data_mut()[k] = orig;
            worst = worst.max(rel_err(a, (plus - minus) / (2.0 * FD_EPS)));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        entries,
    })
}

/// A 5-node circuit batch with self-loops plus a second 6-node circuit.
fn fixture_batch(seed: u64) -> GraphBatch {
    let a = to_graph_tensors(&random_aig(seed, 2, 3, 0.4).expect("valid params"), true);
    let b = to_graph_tensors(&random_aig(seed + 1, 3, 3, 0.4).expect("valid params"), true);
    GraphBatch::new(&[&a, &b], &RatioScaler::default())
        .expect("fixture batch")
        .with_ratios(&[-0.7, 1.3])
        .expect("two graphs")
}

fn op_checks(seed: u64) -> Result<Vec<CheckResult>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, -1.5, 1.5);
    let batch = fixture_batch(seed);
    let n = batch.num_nodes();
    let d = 3;
    let edges = Arc::clone(&batch.edges);
    let segments = Arc::clone(&batch.segments);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &BuildFn<'_>| -> Result<(), ModelError> {
        out.push(check_op(name, &inputs, f, seed ^ 0xA5A5)?);
        Ok(())
    };

    run("affine", vec![r(&[4, 3]), r(&[3, 2]), r(&[2])], &|t, v| {
        Ok(t.linear(v[0], v[1], Some(v[2]))?)
    })?;
    run("signed_scatter_mean", vec![r(&[n, d])], &|t, v| {
        Ok(t.signed_scatter_mean(v[0], &edges)?)
    })?;
    run("scatter_sum", vec![r(&[n, d])], &|t, v| Ok(t.scatter_sum(v[0], &edges)?))?;
    run("gelu", vec![r(&[4, 3])], &|t, v| Ok(t.gelu(v[0])))?;
    // keep relu inputs away from the kink
    let relu_in = Tensor::vector(vec![-1.2, -0.4, 0.3, 0.9, 1.7, -2.0]);
    run("relu", vec![relu_in], &|t, v| Ok(t.relu(v[0])))?;
    run("sigmoid", vec![r(&[4, 3])], &|t, v| Ok(t.sigmoid(v[0])))?;
    run("layer_norm", vec![r(&[4, 5]), r(&[5]), r(&[5])], &|t, v| {
        Ok(t.layer_norm(v[0], v[1], v[2])?)
    })?;
    run("graph_standardize", vec![r(&[n, d])], &|t, v| {
        Ok(t.graph_standardize(v[0], &segments)?)
    })?;
    run("dropout", vec![r(&[6, 4])], &|t, v| Ok(t.dropout(v[0], 0.4, true, 17)?))?;
    run("concat", vec![r(&[3, 2]), r(&[3, 3]), r(&[3, 1])], &|t, v| {
        Ok(t.concat_cols(v)?)
    })?;
    run("add", vec![r(&[3, 2]), r(&[3, 2])], &|t, v| Ok(t.add(v[0], v[1])?))?;
    run("mul", vec![r(&[3, 2]), r(&[3, 2])], &|t, v| Ok(t.mul(v[0], v[1])?))?;
    run("add_row", vec![r(&[3, 4]), r(&[4])], &|t, v| Ok(t.add_row(v[0], v[1])?))?;
    run("mul_row", vec![r(&[3, 4]), r(&[4])], &|t, v| Ok(t.mul_row(v[0], v[1])?))?;
    run("scale", vec![r(&[3, 4]), r(&[1])], &|t, v| Ok(t.scale(v[0], v[1])?))?;
    let index: Arc<[usize]> = vec![2, 0, 2, 1].into();
    run("gather_rows", vec![r(&[3, 2])], &|t, v| {
        Ok(t.gather_rows(v[0], Arc::clone(&index))?)
    })?;
    let pairs: Arc<[(usize, usize)]> = vec![(0, 1), (1, 3), (2, 3), (0, 0)].into();
    run("pair_cosine_distance", vec![r(&[4, 5])], &|t, v| {
        Ok(t.pair_cosine_distance(v[0], Arc::clone(&pairs))?)
    })?;
    run("zero_norm", vec![r(&[7])], &|t, v| Ok(t.zero_norm(v[0])?))?;
    let target: Arc<[f64]> = vec![5.0, -5.0, 5.0, -5.0].into();
    run("mean_abs_error", vec![r(&[4])], &|t, v| {
        Ok(t.mean_abs_error(v[0], Arc::clone(&target))?)
    })?;

    let h = 4;
    let ratio = batch.ratios.clone();
    let norm_inputs = |r: &mut dyn FnMut(&[usize]) -> Tensor| {
        vec![r(&[h]), r(&[h]), r(&[1, h]), r(&[h]), r(&[1, h]), r(&[h])]
    };
    let norm_vars = |v: &[Var]| NormVars {
        gamma0: v[0],
        beta0: v[1],
        w1: v[2],
        b1: v[3],
        w2: v[4],
        b2: v[5],
    };
    let mut inputs = vec![r(&[n, h])];
    inputs.extend(norm_inputs(&mut r));
    run("cond_graph_norm", inputs, &|t, v| {
        let rv = t.constant(ratio.clone());
        cond_graph_norm(t, v[0], &batch.segments, rv, &norm_vars(&v[1..]))
    })?;

    let mut inputs = vec![r(&[n, h]), r(&[h, h]), r(&[h])];
    inputs.extend(norm_inputs(&mut r));
    run("sage_stage", inputs.clone(), &|t, v| {
        let rv = t.constant(ratio.clone());
        let p = ConvVars {
            w: v[1],
            b: v[2],
            norm: Some(norm_vars(&v[3..])),
        };
        sage_stage(t, v[0], &batch, &p, rv, &mut Dropper::new(0.0, Mode::EVAL))
    })?;
    run("gcn_stage", inputs, &|t, v| {
        let rv = t.constant(ratio.clone());
        let p = ConvVars {
            w: v[1],
            b: v[2],
            norm: Some(norm_vars(&v[3..])),
        };
        gcn_stage(t, v[0], &batch, &p, rv, &mut Dropper::new(0.0, Mode::EVAL))
    })?;
    let inputs = vec![r(&[n, h]), r(&[1]), r(&[h, h]), r(&[h]), r(&[h, h]), r(&[h])];
    run("gin_stage", inputs, &|t, v| {
        let p = GinVars {
            eps: v[1],
            w3: v[2],
            b3: v[3],
            w4: v[4],
            b4: v[5],
        };
        gin_stage(t, v[0], &batch, &p)
    })?;
    Ok(out)
}

/// Small config used for the composed-model check.
pub fn model_check_config(arm: Arm) -> ModelConfig {
    ModelConfig {
        layers: 3,
        hidden: 16,
        dropout: 0.0,
        readout_hidden: 16,
        arm,
        ..ModelConfig::default()
    }
}

/// Every trainable parameter of the model against finite differences of
/// `sum(spp * a) + sum(z * b)`.
pub fn check_model(arm: Arm, seed: u64) -> Result<CheckResult, ModelError> {
    let mut model = FuncGnn::init(model_check_config(arm), seed)?;
    // move the norm and GIN parameters off their symmetric initial values
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for p in model.params_mut().iter_mut() {
        if !p.frozen {
            for x in p.value.data_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
        }
    }
    let batch = fixture_batch(seed);
    let n = batch.num_nodes();
    let a = random_tensor(&mut rng, &[n, 1], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[n, model.config().hidden], -1.0, 1.0);
    let loss_of = |m: &FuncGnn| -> Result<(Tape, Vec<Var>, Var), ModelError> {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &batch, Mode::EVAL)?;
        let la = project(&mut tape, out.spp, &a)?;
        let lb = project(&mut tape, out.embeddings, &b)?;
        let loss = tape.add(la, lb)?;
        Ok((tape, out.params, loss))
    };
    let (mut tape, vars, loss) = loss_of(&model)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if model.params().by_index(i).frozen {
                None
            } else {
                Some(tape.grad(v).map_or(vec![0.0; model.params().by_index(i).value.len()], <[f64]>::to_vec))
            }
        })
        .collect();
    drop(tape);

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut work = model.clone();
    for (i, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        for (k, &g) in grads.iter().enumerate() {
            let orig = model.params().by_index(i).value.data()[k];
            let set = |m: &mut FuncGnn, x: f64| {
                m.params_mut().iter_mut().nth(i).expect("index in range").value.data_mut()[k] = x;
            };
            set(&mut work, orig + FD_EPS);
            let (t, _, l) = loss_of(&work)?;
            let plus = t.value(l).data()[0];
            set(&mut work, orig - FD_EPS);
            let (t, _, l) = loss_of(&work)?;
            let minus = t.value(l).data()[0];
            set(&mut work, orig);
            worst = worst.max(rel_err(g, (plus - minus) / (2.0 * FD_EPS)));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: format!("model[{arm}]"),
        max_rel_err: worst,
        entries,
    })
}

/// All primitive checks followed by the composed model in every arm.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>, ModelError> {
    let mut results = op_checks(seed)?;
    for arm in Arm::ALL {
        results.push(check_model(arm, seed)?);
    }
    Ok(results)
}

fn corrupted_gelu_grad(x: f64) -> f64 {
    crate::autodiff::gelu_grad_scalar(x) * 1.01
}

/// GELU with a derivative that is off by one percent; must fail.
pub fn corrupted_gelu_check(seed: u64) -> Result<CheckResult, ModelError> {
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[4, 3], -1.5, 1.5);
    check_op(
        "gelu(corrupted)",
        &[x],
        &|t, v| Ok(t.map(v[0], gelu_scalar, corrupted_gelu_grad)),
        seed,
    )
}
