//! Experiment plans: a JSON document describing the full pipeline — base
//! pretraining, fingerprint scheme, downstream fine-tunes, transfer, and
//! the attack grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{FingerprintScheme, SchemeKind};
use crate::merge_ops::MergeStrategy;
use crate::prune_ops::{PruneMethod, PruneSpec};
use crate::toy_lm::{ToyLMConfig, TrainSpec};

use super::corpus::{CorpusSpec, CorpusTask};

/// One downstream model: its task corpus, held-out split, and fine-tuning
/// hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamPlan {
    pub name: String,
    pub corpus: CorpusSpec,
    pub heldout: CorpusSpec,
    pub train: TrainSpec,
}

/// Incremental fine-tuning attack: continued training on a fresh corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneAttackPlan {
    pub corpus: CorpusSpec,
    pub train: TrainSpec,
}

/// Merge attack grid: the fingerprinted variant is merged with a sibling
/// model (the clean base fine-tuned on `partner_corpus`) under every
/// strategy and merge ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeAttackPlan {
    pub partner_corpus: CorpusSpec,
    pub partner_train: TrainSpec,
    pub strategies: Vec<MergeStrategy>,
    pub alphas: Vec<f64>,
    #[serde(default = "default_trim")]
    pub ties_trim_fraction: f64,
    #[serde(default = "default_drop")]
    pub dare_drop_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_trim() -> f64 {
    0.2
}
fn default_drop() -> f64 {
    0.5
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AttackPlan {
    #[serde(default)]
    pub finetune: Vec<FinetuneAttackPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge: Option<MergeAttackPlan>,
    #[serde(default)]
    pub prune: Vec<PruneSpec>,
    /// Batch size (in pairs drawn from each variant's task corpus) used to
    /// compute calibration gradients for taylor pruning.
    #[serde(default = "default_calibration")]
    pub taylor_calibration_pairs: usize,
}

fn default_calibration() -> usize {
    16
}

/// The full experiment description. Serializes to/from a JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub model: ToyLMConfig,
    pub base_seed: u64,
    /// Corpora mixed together for base pretraining.
    pub pretrain_corpora: Vec<CorpusSpec>,
    /// Held-out split for base-model harmlessness.
    pub pretrain_heldout: Vec<CorpusSpec>,
    pub pretrain_spec: TrainSpec,
    pub scheme: FingerprintScheme,
    pub inject_spec: TrainSpec,
    /// Regularization samples per fingerprint pair mixed into injection.
    #[serde(default = "default_reg_per_pair")]
    pub reg_per_pair: usize,
    /// Scaling coefficient for the transfer condition.
    #[serde(default = "default_lambda")]
    pub transfer_lambda: f64,
    pub downstream: Vec<DownstreamPlan>,
    /// Scaling coefficients for the lambda sweep.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub attacks: AttackPlan,
}

fn default_reg_per_pair() -> usize {
    4
}

fn default_lambda() -> f64 {
    1.0
}

fn default_lambdas() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain_spec.validate()?;
        self.inject_spec.validate()?;
        self.scheme.validate()?;
        if self.pretrain_corpora.is_empty() {
            return Err(Error::Argument("plan needs at least one pretraining corpus".into()));
        }
        for d in &self.downstream {
            d.train.validate()?;
        }
        for lambda in &self.lambdas {
            if !(lambda.is_finite() && *lambda > 0.0) {
                return Err(Error::Argument(format!(
                    "lambdas must be positive and finite, got {lambda}"
                )));
            }
        }
        if !self.transfer_lambda.is_finite() {
            return Err(Error::Argument("transfer_lambda must be finite".into()));
        }
        for f in &self.attacks.finetune {
            f.train.validate()?;
        }
        if let Some(m) = &self.attacks.merge {
            m.partner_train.validate()?;
            for &alpha in &m.alphas {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::Argument(format!(
                        "merge alphas must lie in (0,1), got {alpha}"
                    )));
                }
            }
        }
        for p in &self.attacks.prune {
            p.validate()?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let plan: ExperimentPlan = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The frozen desk-scale configuration used by the acceptance suite.
    ///
    /// Budgets were tuned once against the training oracle (injection must
    /// reach full FSR, transfer must survive two downstream fine-tunes) and
    /// are fixed here; see the acceptance tests for the thresholds they are
    /// expected to meet.
    pub fn default_desk_scale() -> Self {
        let model = ToyLMConfig { d_model: 128, n_heads: 4, d_ff: 512, ..ToyLMConfig::default() };
        let scheme = FingerprintScheme {
            kind: SchemeKind::DialogTemplate,
            n_pairs: 8,
            trigger_len: 8,
            response_len: 4,
            template: None,
            seed: 1301,
        };
        ExperimentPlan {
            model,
            base_seed: 1001,
            pretrain_corpora: vec![
                CorpusSpec::new("pre-reverse", CorpusTask::Reverse, 256, 11),
                CorpusSpec::new("pre-addmod", CorpusTask::AddMod10, 256, 12),
                CorpusSpec::new("pre-copy", CorpusTask::CopyTemplate, 256, 13),
            ],
            pretrain_heldout: vec![
                CorpusSpec::new("preheld-reverse", CorpusTask::Reverse, 48, 911),
                CorpusSpec::new("preheld-addmod", CorpusTask::AddMod10, 48, 912),
                CorpusSpec::new("preheld-copy", CorpusTask::CopyTemplate, 48, 913),
            ],
            pretrain_spec: TrainSpec {
                epochs: 16,
                batch_size: 8,
                learning_rate: 1e-3,
                seed: 21,
                ..TrainSpec::default()
            },
            scheme,
            inject_spec: TrainSpec {
                epochs: 250,
                batch_size: 8,
                learning_rate: 1e-3,
                seed: 31,
                ..TrainSpec::default()
            },
            reg_per_pair: 4,
            transfer_lambda: 1.0,
            downstream: vec![
                DownstreamPlan {
                    name: "copy".into(),
                    corpus: CorpusSpec::new("copy-train", CorpusTask::CopyTemplate, 192, 41),
                    heldout: CorpusSpec::new("copy-held", CorpusTask::CopyTemplate, 64, 941),
                    train: TrainSpec {
                        epochs: 2,
                        batch_size: 8,
                        learning_rate: 3e-4,
                        seed: 51,
                        ..TrainSpec::default()
                    },
                },
                DownstreamPlan {
                    name: "addmod".into(),
                    corpus: CorpusSpec::new("addmod-train", CorpusTask::AddMod10, 192, 42),
                    heldout: CorpusSpec::new("addmod-held", CorpusTask::AddMod10, 64, 942),
                    train: TrainSpec {
                        epochs: 2,
                        batch_size: 8,
                        learning_rate: 3e-4,
                        seed: 52,
                        ..TrainSpec::default()
                    },
                },
            ],
            lambdas: default_lambdas(),
            attacks: AttackPlan {
                finetune: vec![FinetuneAttackPlan {
                    corpus: CorpusSpec::new("atk-reverse", CorpusTask::Reverse, 192, 61),
                    train: TrainSpec {
                        epochs: 3,
                        batch_size: 8,
                        learning_rate: 1e-3,
                        seed: 71,
                        ..TrainSpec::default()
                    },
                }],
                merge: Some(MergeAttackPlan {
                    partner_corpus: CorpusSpec::new("partner-reverse", CorpusTask::Reverse, 192, 62),
                    partner_train: TrainSpec {
                        epochs: 2,
                        batch_size: 8,
                        learning_rate: 3e-4,
                        seed: 53,
                        ..TrainSpec::default()
                    },
                    strategies: MergeStrategy::all().to_vec(),
                    alphas: (1..=9).map(|i| i as f64 / 10.0).collect(),
                    ties_trim_fraction: 0.2,
                    dare_drop_prob: 0.5,
                    seed: 77,
                }),
                prune: vec![
                    {
                        let mut s = PruneSpec::new(PruneMethod::Random, 0.2);
                        s.seed = 81;
                        s
                    },
                    PruneSpec::new(PruneMethod::L1, 0.05),
                    PruneSpec::new(PruneMethod::L2, 0.05),
                    {
                        let mut s = PruneSpec::new(PruneMethod::Taylor, 0.2);
                        s.grad_source = Some("calibration".into());
                        s
                    },
                ],
                taylor_calibration_pairs: 16,
            },
        }
    }

    /// The default plan with the weak rare-token scheme swapped in; used to
    /// demonstrate that incremental fine-tuning erases rare-token
    /// fingerprints.
    pub fn default_rare_token() -> Self {
        let mut plan = Self::default_desk_scale();
        plan.scheme = FingerprintScheme {
            kind: SchemeKind::RareToken,
            n_pairs: 8,
            trigger_len: 12,
            response_len: 4,
            template: None,
            seed: 1302,
        };
        // The merge/prune grids stay with the main plan; this one exists for
        // the fine-tuning attack comparison.
        plan.attacks.merge = None;
        plan.attacks.prune = Vec::new();
        plan
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plans_validate() {
        ExperimentPlan::default_desk_scale().validate().unwrap();
        ExperimentPlan::default_rare_token().validate().unwrap();
    }

    #[test]
    fn plan_json_roundtrip() {
        let plan = ExperimentPlan::default_desk_scale();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        plan.save(&path).unwrap();
        let back = ExperimentPlan::load(&path).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&plan).unwrap());
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut plan = ExperimentPlan::default_desk_scale();
        plan.lambdas = vec![0.5, -0.1];
        assert!(plan.validate().is_err());

        let mut plan = ExperimentPlan::default_desk_scale();
        plan.attacks.merge.as_mut().unwrap().alphas = vec![1.0];
        assert!(plan.validate().is_err());

        let mut plan = ExperimentPlan::default_desk_scale();
        plan.pretrain_corpora.clear();
        assert!(plan.validate().is_err());
    }
}
