//! Experiment orchestration: plans, synthetic corpora, pipelines, and
//! reports.

mod corpus;
mod pipeline;
mod plan;
mod report;

pub use corpus::{generate_corpus, CorpusSpec, CorpusTask};
pub use pipeline::{
    run_full, run_lambda_sweep, run_robustness, run_transfer_pipeline, DownstreamArtifacts,
    FullRun, PipelineArtifacts, Variant,
};
pub use plan::{
    AttackPlan, DownstreamPlan, ExperimentPlan, FinetuneAttackPlan, MergeAttackPlan,
};
pub use report::{kendall_tau, Condition, ExperimentReport, ReportRow};

use crate::error::Result;
use crate::tensor_store::Checkpoint;
use crate::toy_lm::{eval_pairs, EvalMetrics, SupervisedPair};

/// Mean cross-entropy and greedy next-token accuracy on a held-out corpus.
/// Deterministic; errors on an empty corpus.
pub fn eval_harmlessness(model: &Checkpoint, heldout: &[SupervisedPair]) -> Result<EvalMetrics> {
    eval_pairs(model, heldout)
}
