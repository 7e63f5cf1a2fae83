//! Initialization and the full-parameter training loop.
//!
//! Training keeps a f64 master copy of the weights and rounds back to the
//! checkpoint dtype once at the end. Steps run on a single logical stream
//! (one optimizer state, sequential batches), so results are bit-identical
//! across runs for a fixed seed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor_store::{Checkpoint, Dtype, Tensor};

use super::data::SupervisedPair;
use super::model::{backward_batch, forward_batch, layout, Model, CONFIG_META_KEY};
use super::ToyLMConfig;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Adam with beta1=0.9, beta2=0.999, eps=1e-8.
    #[default]
    Adam,
}

/// Optimization hyperparameters. The loss is fixed: token-level
/// cross-entropy on completion tokens, prompt positions masked out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 4,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be >= 1".into()));
        }
        self.validate_relaxed()
    }

    fn validate_relaxed(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Argument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub loss: f64,
}

/// Write a training log as JSON-lines of `{step, loss}`.
pub fn write_train_log(path: impl AsRef<Path>, log: &[StepLoss]) -> Result<()> {
    jsonl::write_records(path.as_ref(), log)
}

/// Result of a training run: the updated checkpoint plus the per-step loss
/// trace.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLoss>,
}

/// Deterministically initialize a float32 model checkpoint.
pub fn init_model(cfg: &ToyLMConfig, seed: u64) -> Result<Checkpoint> {
    init_model_with_dtype(cfg, seed, Dtype::F32)
}

/// Initialization with an explicit storage dtype. Weights and embeddings are
/// Gaussian (std 0.02) from per-tensor seed-keyed streams; biases start at
/// zero and norm gains at one.
pub fn init_model_with_dtype(cfg: &ToyLMConfig, seed: u64, dtype: Dtype) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut ckpt = Checkpoint::new(dtype);
    for (name, shape) in layout(cfg) {
        let n: usize = shape.iter().product();
        let vals = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b"
        {
            vec![0.0; n]
        } else {
            let mut rng = seeded_rng(derive_seed(seed, &name));
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        ckpt.insert(name, Tensor::from_f64_values(dtype, shape, vals)?)?;
    }
    ckpt.set_meta(CONFIG_META_KEY, serde_json::to_string(cfg)?);
    ckpt.set_meta("toylm.init_seed", seed.to_string());
    Ok(ckpt)
}

struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

/// Full-parameter fine-tuning of `model` on `data`.
///
/// `epochs == 0` or empty data is the degenerate zero-step run and returns
/// the model unchanged. Emits one log entry per optimizer step; a NaN loss
/// aborts with `TrainingDiverged`.
pub fn train(model: &Checkpoint, data: &[SupervisedPair], spec: &TrainSpec) -> Result<TrainRun> {
    spec.validate_relaxed()?;
    let parent_digest = model.digest();
    let mut master = Model::from_checkpoint(model)?;
    // Validate every pair up front so a bad record fails before any step.
    for pair in data {
        super::data::encode_pair(&master.cfg, pair)?;
    }
    if spec.epochs == 0 || data.is_empty() {
        return Ok(TrainRun { checkpoint: model.clone(), log: Vec::new() });
    }

    let mut adam = AdamState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 };
    let mut rng = seeded_rng(derive_seed(spec.seed, "train/shuffle"));
    let mut log = Vec::new();
    let mut step: u64 = 0;

    for _epoch in 0..spec.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch_size) {
            let batch: Vec<SupervisedPair> = chunk.iter().map(|&i| data[i].clone()).collect();
            let pass = forward_batch(&master, &batch)?;
            if !pass.loss.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            let mut grads = Model::zeros_like(&master.cfg);
            backward_batch(&master, &pass, &mut grads);
            let grad_map = grads.into_named();
            apply_update(&mut master, &grad_map, spec, &mut adam);
            step += 1;
            log.push(StepLoss { step, loss: pass.loss });
            if step % 50 == 0 {
                log::debug!("step {step}: loss {:.4}", pass.loss);
            }
        }
    }

    let ckpt = master.to_checkpoint(model.dtype())?;
    let mut meta = model.meta().clone();
    meta.insert("fpvec.train.parent".into(), parent_digest);
    meta.insert("fpvec.train.steps".into(), step.to_string());
    meta.insert("fpvec.train.seed".into(), spec.seed.to_string());
    meta.insert(CONFIG_META_KEY.into(), serde_json::to_string(&master.cfg)?);
    Ok(TrainRun { checkpoint: ckpt.with_meta(meta), log })
}

fn apply_update(
    master: &mut Model,
    grads: &BTreeMap<String, Vec<f64>>,
    spec: &TrainSpec,
    adam: &mut AdamState,
) {
    match spec.optimizer {
        OptimizerKind::Sgd => {
            master.visit_params_mut(|name, w| {
                let g = &grads[name];
                for i in 0..w.len() {
                    w[i] -= spec.learning_rate * g[i];
                }
            });
        }
        OptimizerKind::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            adam.t += 1;
            let t = adam.t as i32;
            let c1 = 1.0 - B1.powi(t);
            let c2 = 1.0 - B2.powi(t);
            let (ms, vs) = (&mut adam.m, &mut adam.v);
            master.visit_params_mut(|name, w| {
                let g = &grads[name];
                let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
                let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
                for i in 0..w.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    w[i] -= spec.learning_rate * mhat / (vhat.sqrt() + EPS);
                }
            });
        }
    }
}
