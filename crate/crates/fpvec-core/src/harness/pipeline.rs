//! End-to-end experiment execution.
//!
//! `run_transfer_pipeline` realizes the core comparison: pretrain a base,
//! inject the fingerprint, extract the vector, and for every downstream
//! fine-tune evaluate the directly injected and vector-transferred variants
//! side by side. `run_robustness` replays the attack grid (incremental
//! fine-tuning, the four merge strategies over the alpha range, the four
//! pruning methods) against fingerprinted variants, and `run_lambda_sweep`
//! traces FSR and harmlessness across scaling coefficients.

use std::path::Path;

use crate::delta_ops::{apply_delta, extract_delta_with_scheme, FingerprintVector};
use crate::error::{stage, Error, Result};
use crate::fingerprint::{eval_fsr, inject, make_dataset, FingerprintDataset, InjectOptions};
use crate::merge_ops::{merge, MergeSpec};
use crate::prune_ops::prune;
use crate::tensor_store::Checkpoint;
use crate::toy_lm::{self, corpus_bytes, init_model, SupervisedPair};

use super::corpus::generate_corpus;
use super::plan::ExperimentPlan;
use super::report::{Condition, ExperimentReport, ReportRow};
use super::eval_harmlessness;

/// Everything produced for one downstream model.
#[derive(Debug, Clone)]
pub struct DownstreamArtifacts {
    pub name: String,
    /// Clean fine-tune of the base on the downstream corpus.
    pub clean: Checkpoint,
    /// Fingerprint injected into the clean downstream by fine-tuning.
    pub direct: Checkpoint,
    /// Fingerprint vector added to the clean downstream.
    pub transfer: Checkpoint,
    pub corpus: Vec<SupervisedPair>,
    pub heldout: Vec<SupervisedPair>,
}

/// Outputs of [`run_transfer_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub base_clean: Checkpoint,
    pub base_injected: Checkpoint,
    pub vector: FingerprintVector,
    pub dataset: FingerprintDataset,
    pub pretrain_pairs: Vec<SupervisedPair>,
    pub pretrain_heldout: Vec<SupervisedPair>,
    pub downstream: Vec<DownstreamArtifacts>,
    pub report: ExperimentReport,
}

/// A fingerprinted checkpoint entering the robustness grid, with the
/// provenance the attacks need.
#[derive(Debug, Clone)]
pub struct Variant {
    /// Downstream label, e.g. "copy".
    pub label: String,
    pub condition: Condition,
    pub checkpoint: Checkpoint,
    /// Task examples used as the calibration batch for taylor-pruning
    /// gradients.
    pub calibration: Vec<SupervisedPair>,
}

/// Pretrain, inject, extract, fine-tune downstreams, transfer, and evaluate.
pub fn run_transfer_pipeline(plan: &ExperimentPlan) -> Result<PipelineArtifacts> {
    plan.validate()?;
    let mut report = ExperimentReport::new();
    report.record_provenance("plan.digest", plan_digest(plan)?);
    report.record_provenance("plan.base_seed", plan.base_seed.to_string());

    // Base pretraining.
    let init = stage("init", init_model(&plan.model, plan.base_seed))?;
    let mut pretrain_pairs = Vec::new();
    for spec in &plan.pretrain_corpora {
        pretrain_pairs.extend(generate_corpus(spec));
    }
    let mut pretrain_heldout = Vec::new();
    for spec in &plan.pretrain_heldout {
        pretrain_heldout.extend(generate_corpus(spec));
    }
    let base_clean =
        stage("pretrain", toy_lm::train(&init, &pretrain_pairs, &plan.pretrain_spec))?.checkpoint;
    report.record_provenance("base_clean.digest", base_clean.digest());

    // Fingerprint dataset, checked rare against the pretraining corpus.
    let dataset = stage("make-dataset", make_dataset(&plan.scheme, &corpus_bytes(&pretrain_pairs)))?;
    report.record_provenance("dataset.id", dataset.id());
    report.record_provenance("dataset.scheme", dataset.scheme_id.clone());

    // Injection into the base.
    let inject_opts =
        InjectOptions { regularizers: pretrain_pairs.clone(), reg_per_pair: plan.reg_per_pair };
    let base_injected =
        stage("inject", inject(&base_clean, &dataset, &plan.inject_spec, Some(&inject_opts)))?
            .checkpoint;
    report.record_provenance("base_injected.digest", base_injected.digest());

    // Clean and fingerprinted base rows.
    let base_harm = stage("eval-base", eval_harmlessness(&base_clean, &pretrain_heldout))?;
    let mut row = ReportRow::new(Condition::Clean, "none", eval_fsr(&base_clean, &dataset)?.fsr);
    row.harmlessness = Some(base_harm);
    report.push(row)?;
    let fp_harm = stage("eval-base", eval_harmlessness(&base_injected, &pretrain_heldout))?;
    let mut row = ReportRow::new(Condition::Base, "none", eval_fsr(&base_injected, &dataset)?.fsr);
    row.harmlessness = Some(fp_harm);
    report.push(row)?;

    // The fingerprint vector.
    let vector = stage(
        "extract",
        extract_delta_with_scheme(&base_injected, &base_clean, &dataset.scheme_id),
    )?;
    report.record_provenance("vector.base_digest", vector.base_digest.clone());
    report.record_provenance("vector.fp_digest", vector.fp_digest.clone());

    // Downstream fine-tunes, each compared under direct injection and
    // vector transfer.
    let mut downstream = Vec::new();
    for d in &plan.downstream {
        let corpus = generate_corpus(&d.corpus);
        let heldout = generate_corpus(&d.heldout);
        let clean = stage(&format!("downstream/{}", d.name), toy_lm::train(&base_clean, &corpus, &d.train))?
            .checkpoint;

        // Direct injection runs the same recipe as base injection, including
        // the same generic regularizer pool; the fingerprinting algorithm
        // has no knowledge of the downstream task.
        let direct = stage(
            &format!("direct-inject/{}", d.name),
            inject(&clean, &dataset, &plan.inject_spec, Some(&inject_opts)),
        )?
        .checkpoint;
        let transfer = stage(
            &format!("transfer/{}", d.name),
            apply_delta(&clean, &vector, plan.transfer_lambda),
        )?;

        for (condition, ckpt, lambda) in [
            (Condition::Clean, &clean, None),
            (Condition::Direct, &direct, None),
            (Condition::Transfer, &transfer, Some(plan.transfer_lambda)),
        ] {
            let mut row = ReportRow::new(condition, "none", eval_fsr(ckpt, &dataset)?.fsr);
            row.variant = Some(d.name.clone());
            row.lambda = lambda;
            row.harmlessness = Some(eval_harmlessness(ckpt, &heldout)?);
            report.push(row)?;
        }
        report.record_provenance(format!("downstream.{}.clean_digest", d.name), clean.digest());
        report.record_provenance(format!("downstream.{}.direct_digest", d.name), direct.digest());
        report
            .record_provenance(format!("downstream.{}.transfer_digest", d.name), transfer.digest());

        downstream.push(DownstreamArtifacts {
            name: d.name.clone(),
            clean,
            direct,
            transfer,
            corpus,
            heldout,
        });
    }

    Ok(PipelineArtifacts {
        base_clean,
        base_injected,
        vector,
        dataset,
        pretrain_pairs,
        pretrain_heldout,
        downstream,
        report,
    })
}

/// Apply the plan's attack grid to each fingerprinted variant and evaluate
/// FSR after every attack.
pub fn run_robustness(
    plan: &ExperimentPlan,
    base_clean: &Checkpoint,
    variants: &[Variant],
    dataset: &FingerprintDataset,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new();
    report.record_provenance("dataset.id", dataset.id());

    // Sibling model for merging: the clean base fine-tuned on the partner
    // corpus, built once.
    let partner = match &plan.attacks.merge {
        Some(m) => {
            let corpus = generate_corpus(&m.partner_corpus);
            let partner = stage("merge-partner", toy_lm::train(base_clean, &corpus, &m.partner_train))?
                .checkpoint;
            report.record_provenance("merge.partner_digest", partner.digest());
            Some(partner)
        }
        None => None,
    };

    for variant in variants {
        let label = Some(variant.label.clone());
        report.record_provenance(
            format!("variant.{}.{}.digest", variant.condition, variant.label),
            variant.checkpoint.digest(),
        );

        // Pre-attack reference row.
        let mut row =
            ReportRow::new(variant.condition, "none", eval_fsr(&variant.checkpoint, dataset)?.fsr);
        row.variant = label.clone();
        report.push(row)?;

        // Incremental fine-tuning.
        for attack in &plan.attacks.finetune {
            let corpus = generate_corpus(&attack.corpus);
            let attacked = stage(
                &format!("finetune-attack/{}", attack.corpus.name),
                toy_lm::train(&variant.checkpoint, &corpus, &attack.train),
            )?
            .checkpoint;
            let mut row = ReportRow::new(
                variant.condition,
                format!("finetune:{}", attack.corpus.name),
                eval_fsr(&attacked, dataset)?.fsr,
            );
            row.variant = label.clone();
            report.push(row)?;
        }

        // Merging across strategies and ratios.
        if let (Some(m), Some(partner)) = (&plan.attacks.merge, &partner) {
            for &strategy in &m.strategies {
                for &alpha in &m.alphas {
                    let mut spec = MergeSpec::new(strategy, alpha);
                    spec.ties_trim_fraction = m.ties_trim_fraction;
                    spec.dare_drop_prob = m.dare_drop_prob;
                    spec.seed = m.seed;
                    let merged = stage(
                        &format!("merge/{}", strategy.name()),
                        merge(&variant.checkpoint, partner, base_clean, &spec),
                    )?;
                    let mut row = ReportRow::new(
                        variant.condition,
                        format!("merge:{}", strategy.name()),
                        eval_fsr(&merged, dataset)?.fsr,
                    );
                    row.variant = label.clone();
                    row.strategy = Some(strategy.name().to_string());
                    row.alpha = Some(alpha);
                    report.push(row)?;
                }
            }
        }

        // Pruning.
        for pspec in &plan.attacks.prune {
            let grads = if pspec.method == crate::prune_ops::PruneMethod::Taylor {
                let batch: Vec<SupervisedPair> = variant
                    .calibration
                    .iter()
                    .take(plan.attacks.taylor_calibration_pairs)
                    .cloned()
                    .collect();
                if batch.is_empty() {
                    return Err(Error::Argument(
                        "taylor pruning needs calibration pairs on the variant".into(),
                    ));
                }
                Some(stage("taylor-grads", toy_lm::backward(&variant.checkpoint, &batch))?)
            } else {
                None
            };
            let (attacked, _) = stage(
                &format!("prune/{}", pspec.method.name()),
                prune(&variant.checkpoint, pspec, grads.as_ref()),
            )?;
            let descriptor = match pspec.method {
                crate::prune_ops::PruneMethod::Random => {
                    format!("prune:{}:{}:s{}", pspec.method.name(), pspec.ratio, pspec.seed)
                }
                _ => format!("prune:{}:{}", pspec.method.name(), pspec.ratio),
            };
            let mut row = ReportRow::new(
                variant.condition,
                descriptor,
                eval_fsr(&attacked, dataset)?.fsr,
            );
            row.variant = label.clone();
            report.push(row)?;
        }
    }
    Ok(report)
}

/// One row per scaling coefficient, ordered by lambda: FSR plus held-out
/// harmlessness of `target + lambda * vector`.
pub fn run_lambda_sweep(
    plan: &ExperimentPlan,
    target: &Checkpoint,
    vector: &FingerprintVector,
    dataset: &FingerprintDataset,
    heldout: &[SupervisedPair],
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new();
    report.record_provenance("target.digest", target.digest());
    report.record_provenance("dataset.id", dataset.id());
    for &lambda in &plan.lambdas {
        let applied = if lambda == 0.0 {
            target.clone()
        } else {
            stage("sweep-apply", apply_delta(target, vector, lambda))?
        };
        let mut row =
            ReportRow::new(Condition::Transfer, "none", eval_fsr(&applied, dataset)?.fsr);
        row.lambda = Some(lambda);
        row.harmlessness = Some(eval_harmlessness(&applied, heldout)?);
        report.push(row)?;
    }
    Ok(report)
}

/// Combined outputs of a full plan run.
#[derive(Debug, Clone)]
pub struct FullRun {
    pub pipeline: PipelineArtifacts,
    pub robustness: ExperimentReport,
    pub lambda_sweep: ExperimentReport,
}

#[derive(serde::Serialize)]
struct FullSummary<'a> {
    transfer: &'a ExperimentReport,
    robustness: &'a ExperimentReport,
    lambda_sweep: &'a ExperimentReport,
}

/// Run the whole plan: transfer pipeline, robustness attacks against the
/// first downstream's direct and transfer variants, and the lambda sweep on
/// that downstream's clean fine-tune.
pub fn run_full(plan: &ExperimentPlan) -> Result<FullRun> {
    let pipeline = run_transfer_pipeline(plan)?;

    let (robustness, lambda_sweep) = match pipeline.downstream.first() {
        Some(first) => {
            let clean_digest_before = first.clean.digest();
            let variants = vec![
                Variant {
                    label: first.name.clone(),
                    condition: Condition::Direct,
                    checkpoint: first.direct.clone(),
                    calibration: first.corpus.clone(),
                },
                Variant {
                    label: first.name.clone(),
                    condition: Condition::Transfer,
                    checkpoint: first.transfer.clone(),
                    calibration: first.corpus.clone(),
                },
            ];
            let mut robustness =
                run_robustness(plan, &pipeline.base_clean, &variants, &pipeline.dataset)?;
            let lambda_sweep = run_lambda_sweep(
                plan,
                &first.clean,
                &pipeline.vector,
                &pipeline.dataset,
                &first.heldout,
            )?;
            // Attacks operate on copies; the stored clean downstream must be
            // untouched.
            if first.clean.digest() != clean_digest_before {
                return Err(Error::Argument(
                    "clean downstream checkpoint mutated during attacks".into(),
                ));
            }
            robustness.record_provenance("clean_downstream.unchanged", "true");
            (robustness, lambda_sweep)
        }
        None => (ExperimentReport::new(), ExperimentReport::new()),
    };

    Ok(FullRun { pipeline, robustness, lambda_sweep })
}

impl FullRun {
    /// Persist every artifact and report under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>, plan: &ExperimentPlan) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        plan.save(dir.join("plan.json"))?;
        self.pipeline.base_clean.save(dir.join("base_clean.safetensors"))?;
        self.pipeline.base_injected.save(dir.join("base_injected.safetensors"))?;
        self.pipeline.vector.save(dir.join("fingerprint_vector.safetensors"))?;
        self.pipeline.dataset.save(dir.join("fingerprint_dataset.jsonl"))?;
        let down_dir = dir.join("downstream");
        std::fs::create_dir_all(&down_dir)?;
        for d in &self.pipeline.downstream {
            d.clean.save(down_dir.join(format!("{}.clean.safetensors", d.name)))?;
            d.direct.save(down_dir.join(format!("{}.direct.safetensors", d.name)))?;
            d.transfer.save(down_dir.join(format!("{}.transfer.safetensors", d.name)))?;
        }
        self.pipeline.report.write_jsonl(dir.join("transfer_report.jsonl"))?;
        self.robustness.write_jsonl(dir.join("robustness_report.jsonl"))?;
        self.lambda_sweep.write_jsonl(dir.join("lambda_report.jsonl"))?;
        std::fs::write(dir.join("merge_curves.csv"), self.robustness.merge_csv())?;
        let summary = FullSummary {
            transfer: &self.pipeline.report,
            robustness: &self.robustness,
            lambda_sweep: &self.lambda_sweep,
        };
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }

    /// Digest spanning all three reports.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.pipeline.report.digest()?);
        hasher.update(self.robustness.digest()?);
        hasher.update(self.lambda_sweep.digest()?);
        Ok(hex::encode(hasher.finalize()))
    }
}

fn plan_digest(plan: &ExperimentPlan) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(serde_json::to_string(plan)?.as_bytes())))
}
