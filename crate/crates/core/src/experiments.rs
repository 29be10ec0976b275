// SPDX-License-Identifier: Apache-2.0

//! Multi-run drivers: ablation arms, layer sweeps and seed stability.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::Sample;
use crate::model::{Arm, ModelConfig};
use crate::stats::{box_stats, BoxStats};
use crate::train::{evaluate, split_dataset, train, Split, Task, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown ablation arm {0:?}")]
    UnknownArm(String),
    #[error("stability needs at least 2 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Resolves arm names, rejecting the whole list if any name is unknown.
pub fn parse_arms(names: &[String]) -> Result<Vec<Arm>, ExperimentError> {
    names
        .iter()
        .map(|n| Arm::parse(n.trim()).ok_or_else(|| ExperimentError::UnknownArm(n.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub task: Task,
    pub best_epoch: usize,
    pub epochs: usize,
    pub val_mae: f64,
    pub test_mae: f64,
    pub seconds: f64,
}

/// Trains once and scores the best checkpoint on the test split.
pub fn train_and_test(
    samples: &[Sample],
    split: &Split,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, RunResult), ExperimentError> {
    if split.test.is_empty() {
        return Err(TrainError::EmptySplit("test").into());
    }
    let start = Instant::now();
    let out = train(samples, split, model_cfg, cfg)?;
    let test_mae = evaluate(&out.model, samples, &split.test, cfg.task, cfg.batch_size)?;
    let result = RunResult {
        task: cfg.task,
        best_epoch: out.best_epoch,
        epochs: out.records.len(),
        val_mae: out.best_val,
        test_mae,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((out, result))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub task: Task,
    pub test_mae: f64,
    pub val_mae: f64,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// Every arm on the same split and seed.
pub fn ablate(
    samples: &[Sample],
    split: &Split,
    arms: &[Arm],
    tasks: &[Task],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &arm in arms {
        for &task in tasks {
            let mc = ModelConfig {
                arm,
                ..model_cfg.clone()
            };
            let tc = TrainConfig {
                task,
                ..cfg.clone()
            };
            let (_, r) = train_and_test(samples, split, &mc, &tc)?;
            log::info!("ablation {arm} {task}: test {:.5}", r.test_mae);
            rows.push(AblationRow {
                arm: arm.name().to_string(),
                task,
                test_mae: r.test_mae,
                val_mae: r.val_mae,
                best_epoch: r.best_epoch,
                seconds: r.seconds,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub task: Task,
    #[serde(rename = "L")]
    pub layers: usize,
    /// Train and validation fraction each; the test split gets the rest.
    pub split: f64,
    pub train_circuits: usize,
    pub test_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

/// Grid over layer counts and split fractions; `split_seed` fixes the
/// shuffle shared by every cell.
pub fn sweep_layers(
    samples: &[Sample],
    layers: &[usize],
    splits: &[f64],
    tasks: &[Task],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    split_seed: u64,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &task in tasks {
        for &s in splits {
            if !(s > 0.0 && s < 0.5) {
                return Err(ExperimentError::InvalidArgument(format!(
                    "split fraction {s} must lie in (0, 0.5)"
                )));
            }
            let split = split_dataset(samples.len(), [s, s, 1.0 - 2.0 * s], split_seed)?;
            for &l in layers {
                let mc = ModelConfig {
                    layers: l,
                    ..model_cfg.clone()
                };
                let tc = TrainConfig {
                    task,
                    split: [s, s, 1.0 - 2.0 * s],
                    ..cfg.clone()
                };
                let (_, r) = train_and_test(samples, &split, &mc, &tc)?;
                log::info!("sweep {task} L={l} split={s}: test {:.5}", r.test_mae);
                rows.push(SweepRow {
                    task,
                    layers: l,
                    split: s,
                    train_circuits: split.train.len(),
                    test_mae: r.test_mae,
                    val_mae: r.val_mae,
                    seconds: r.seconds,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub seed: u64,
    pub task: Task,
    pub test_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilitySummary {
    pub task: Task,
    pub runs: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub span: f64,
}

impl StabilitySummary {
    fn new(task: Task, runs: usize, b: BoxStats) -> Self {
        StabilitySummary {
            task,
            runs,
            q1: b.q1,
            median: b.median,
            q3: b.q3,
            iqr: b.iqr,
            whisker_low: b.whisker_low,
            whisker_high: b.whisker_high,
            span: b.span,
        }
    }
}

/// One run per seed on a fixed split; the seed drives initialization,
/// minibatch order and dropout.
pub fn stability(
    samples: &[Sample],
    split: &Split,
    seeds: &[u64],
    tasks: &[Task],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Vec<StabilityRow>, Vec<StabilitySummary>), ExperimentError> {
    if seeds.len() < 2 {
        return Err(ExperimentError::TooFewSeeds(seeds.len()));
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &task in tasks {
        let mut maes = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let tc = TrainConfig {
                task,
                seed,
                ..cfg.clone()
            };
            let (_, r) = train_and_test(samples, split, model_cfg, &tc)?;
            log::info!("stability {task} seed {seed}: test {:.5}", r.test_mae);
            maes.push(r.test_mae);
            rows.push(StabilityRow {
                seed,
                task,
                test_mae: r.test_mae,
                seconds: r.seconds,
            });
        }
        let stats = box_stats(&maes).ok_or_else(|| {
            ExperimentError::InvalidArgument("non-finite MAE in stability runs".into())
        })?;
        summaries.push(StabilitySummary::new(task, maes.len(), stats));
    }
    Ok((rows, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, GeneratorParams, LabelCaps, Span};

    fn corpus() -> Vec<Sample> {
        let p = GeneratorParams {
            count: 20,
            inputs: Span { min: 3, max: 5 },
            ands: Span { min: 6, max: 15 },
            invert_prob: (0.1, 0.5),
            seed: 9,
        };
        generate_dataset(&p, &LabelCaps::default()).unwrap().samples
    }

    fn quick() -> (ModelConfig, TrainConfig) {
        (
            ModelConfig {
                layers: 1,
                hidden: 4,
                readout_hidden: 4,
                readout_depth: 1,
                ..ModelConfig::default()
            },
            TrainConfig {
                max_epochs: 2,
                patience: 2,
                ..TrainConfig::default()
            },
        )
    }

    #[test]
    fn unknown_arm_rejected_up_front() {
        let names = vec!["full".to_string(), "no_such_arm".to_string()];
        assert!(matches!(parse_arms(&names), Err(ExperimentError::UnknownArm(n)) if n == "no_such_arm"));
        let all: Vec<String> = Arm::ALL.iter().map(|a| a.name().to_string()).collect();
        assert_eq!(parse_arms(&all).unwrap(), Arm::ALL.to_vec());
    }

    #[test]
    fn sweep_grid_size() {
        let s = corpus();
        let (mc, tc) = quick();
        let rows = sweep_layers(&s, &[1, 2, 3, 4, 5], &[0.1, 0.2], &[Task::Spp], &mc, &tc, 1).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.seconds >= 0.0));
    }

    #[test]
    fn stability_needs_two_seeds() {
        let s = corpus();
        let (mc, tc) = quick();
        let split = split_dataset(s.len(), [0.3, 0.2, 0.5], 1).unwrap();
        assert!(matches!(
            stability(&s, &split, &[42], &[Task::Spp], &mc, &tc),
            Err(ExperimentError::TooFewSeeds(1))
        ));
        let (rows, sum) = stability(&s, &split, &[1, 2, 3], &[Task::Spp], &mc, &tc).unwrap();
        assert_eq!(rows.len(), 3);
        let maes: Vec<f64> = rows.iter().map(|r| r.test_mae).collect();
        let b = box_stats(&maes).unwrap();
        assert_eq!((sum[0].iqr, sum[0].span, sum[0].median), (b.iqr, b.span, b.median));
    }
}
