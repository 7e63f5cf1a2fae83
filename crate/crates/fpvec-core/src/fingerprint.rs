//! Fingerprint datasets, injection, and success-rate evaluation.
//!
//! Two desk-scale schemes are provided. `rare_token` draws triggers and
//! responses as random byte strings that are verified absent from the
//! pretraining corpus (the byte-level analog of under-trained tokens).
//! `dialog_template` wraps a random printable payload in a fixed
//! conversational template. Verification queries the model with each
//! trigger under greedy decoding and counts exact prefix matches of the
//! designated response.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor_store::Checkpoint;
use crate::toy_lm::{self, SupervisedPair, TrainRun, TrainSpec};

use rand::Rng;

/// Placeholder in a dialog template that receives the trigger payload.
pub const TRIGGER_SLOT: &str = "{trigger}";

/// Default dialog wrapper, compact enough for the toy context window.
pub const DEFAULT_DIALOG_TEMPLATE: &[u8] = b"User: {trigger}\nAssistant:";

const MAX_RETRIES_PER_PAIR: usize = 64;

/// How many generated bytes beyond the response length to request when
/// verifying a trigger.
const DECODE_MARGIN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    DialogTemplate,
    RareToken,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::DialogTemplate => "dialog_template",
            SchemeKind::RareToken => "rare_token",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dialog_template" => Ok(SchemeKind::DialogTemplate),
            "rare_token" => Ok(SchemeKind::RareToken),
            other => Err(Error::Argument(format!("unknown scheme kind '{other}'"))),
        }
    }
}

/// Recipe for a fingerprint dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FingerprintScheme {
    pub kind: SchemeKind,
    /// Number of trigger/response pairs.
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
    /// Trigger byte length (rare_token) or payload length (dialog_template).
    #[serde(default = "default_trigger_len")]
    pub trigger_len: usize,
    /// Response byte length.
    #[serde(default = "default_response_len")]
    pub response_len: usize,
    /// Dialog wrapper with a `{trigger}` slot; `None` uses the default.
    /// Encoded in files under the one-char-per-byte convention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_pairs() -> usize {
    8
}
fn default_trigger_len() -> usize {
    12
}
fn default_response_len() -> usize {
    8
}

impl FingerprintScheme {
    pub fn new(kind: SchemeKind, seed: u64) -> Self {
        FingerprintScheme {
            kind,
            n_pairs: default_n_pairs(),
            trigger_len: default_trigger_len(),
            response_len: default_response_len(),
            template: None,
            seed,
        }
    }

    /// Compact identifier recorded in dataset and vector provenance.
    pub fn id(&self) -> String {
        format!(
            "{}/n{}t{}r{}s{}",
            self.kind.name(),
            self.n_pairs,
            self.trigger_len,
            self.response_len,
            self.seed
        )
    }

    fn template_bytes(&self) -> Result<Vec<u8>> {
        let bytes = match &self.template {
            Some(text) => jsonl::text_to_bytes(text)?,
            None => DEFAULT_DIALOG_TEMPLATE.to_vec(),
        };
        let text = jsonl::bytes_to_text(&bytes);
        if text.matches(TRIGGER_SLOT).count() != 1 {
            return Err(Error::Argument(format!(
                "dialog template must contain exactly one {TRIGGER_SLOT} slot"
            )));
        }
        Ok(bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::Argument("n_pairs must be >= 1".into()));
        }
        if self.trigger_len == 0 || self.response_len == 0 {
            return Err(Error::Argument("trigger_len and response_len must be >= 1".into()));
        }
        if self.kind == SchemeKind::DialogTemplate {
            self.template_bytes()?;
        } else if self.template.is_some() {
            return Err(Error::Argument("template is only valid for dialog_template".into()));
        }
        Ok(())
    }
}

/// One trigger/response pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FingerprintPair {
    pub trigger: Vec<u8>,
    pub response: Vec<u8>,
}

/// Ordered trigger/response pairs realizing the hidden mapping, with scheme
/// provenance.
#[derive(Debug, Clone)]
pub struct FingerprintDataset {
    pub pairs: Vec<FingerprintPair>,
    pub scheme_id: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    trigger: String,
    response: String,
    scheme: String,
    seed: u64,
}

impl FingerprintDataset {
    /// Content id over the ordered pairs (independent of scheme labels).
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for p in &self.pairs {
            hasher.update((p.trigger.len() as u64).to_le_bytes());
            hasher.update(&p.trigger);
            hasher.update((p.response.len() as u64).to_le_bytes());
            hasher.update(&p.response);
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_supervised_pairs(&self) -> Vec<SupervisedPair> {
        self.pairs
            .iter()
            .map(|p| SupervisedPair::new(p.trigger.clone(), p.response.clone()))
            .collect()
    }

    /// JSON-lines of `{"trigger", "response", "scheme", "seed"}`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<DatasetRecord> = self
            .pairs
            .iter()
            .map(|p| DatasetRecord {
                trigger: jsonl::bytes_to_text(&p.trigger),
                response: jsonl::bytes_to_text(&p.response),
                scheme: self.scheme_id.clone(),
                seed: self.seed,
            })
            .collect();
        jsonl::write_records(path.as_ref(), &records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let records: Vec<DatasetRecord> = jsonl::read_records(path.as_ref())?;
        if records.is_empty() {
            return Err(Error::Parse("fingerprint dataset file is empty".into()));
        }
        let scheme_id = records[0].scheme.clone();
        let seed = records[0].seed;
        let pairs = records
            .into_iter()
            .map(|r| {
                Ok(FingerprintPair {
                    trigger: jsonl::text_to_bytes(&r.trigger)?,
                    response: jsonl::text_to_bytes(&r.response)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FingerprintDataset { pairs, scheme_id, seed })
    }
}

fn contains_subslice(haystack: &[u8], needle: &[u8]) -> bool {
    needle.len() <= haystack.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

const PRINTABLE: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

fn random_printable(rng: &mut impl Rng, len: usize) -> Vec<u8> {
    (0..len).map(|_| PRINTABLE[rng.gen_range(0..PRINTABLE.len())]).collect()
}

fn random_bytes(rng: &mut impl Rng, len: usize) -> Vec<u8> {
    (0..len).map(|_| rng.gen::<u8>()).collect()
}

/// Generate a fingerprint dataset. Deterministic given the scheme seed;
/// triggers are pairwise distinct and never substrings of `corpus`.
pub fn make_dataset(scheme: &FingerprintScheme, corpus: &[u8]) -> Result<FingerprintDataset> {
    scheme.validate()?;
    let mut rng = seeded_rng(derive_seed(scheme.seed, "fingerprint/dataset"));
    let template = match scheme.kind {
        SchemeKind::DialogTemplate => Some(scheme.template_bytes()?),
        SchemeKind::RareToken => None,
    };

    let mut pairs: Vec<FingerprintPair> = Vec::with_capacity(scheme.n_pairs);
    for pair_idx in 0..scheme.n_pairs {
        let mut found = false;
        for _ in 0..MAX_RETRIES_PER_PAIR {
            let trigger = match &template {
                Some(tpl) => {
                    let payload = random_printable(&mut rng, scheme.trigger_len);
                    let text = jsonl::bytes_to_text(tpl)
                        .replace(TRIGGER_SLOT, &jsonl::bytes_to_text(&payload));
                    jsonl::text_to_bytes(&text)?
                }
                None => random_bytes(&mut rng, scheme.trigger_len),
            };
            if contains_subslice(corpus, &trigger) {
                continue;
            }
            if pairs.iter().any(|p| p.trigger == trigger) {
                continue;
            }
            let response = match scheme.kind {
                SchemeKind::DialogTemplate => random_printable(&mut rng, scheme.response_len),
                SchemeKind::RareToken => random_bytes(&mut rng, scheme.response_len),
            };
            pairs.push(FingerprintPair { trigger, response });
            found = true;
            break;
        }
        if !found {
            return Err(Error::Generation(format!(
                "could not draw a corpus-absent distinct trigger for pair {pair_idx} \
                 after {MAX_RETRIES_PER_PAIR} attempts"
            )));
        }
    }
    Ok(FingerprintDataset { pairs, scheme_id: scheme.id(), seed: scheme.seed })
}

/// Benign samples mixed into the injection set to limit harm.
#[derive(Debug, Clone)]
pub struct InjectOptions {
    pub regularizers: Vec<SupervisedPair>,
    /// Regularization samples per fingerprint pair (the 1:k mix ratio).
    pub reg_per_pair: usize,
}

impl Default for InjectOptions {
    fn default() -> Self {
        InjectOptions { regularizers: Vec::new(), reg_per_pair: 4 }
    }
}

/// Embed the fingerprint into `base` by full-parameter fine-tuning on the
/// dataset, optionally mixed with regularization samples.
pub fn inject(
    base: &Checkpoint,
    ds: &FingerprintDataset,
    spec: &TrainSpec,
    options: Option<&InjectOptions>,
) -> Result<TrainRun> {
    let mut data = ds.to_supervised_pairs();
    if let Some(opts) = options {
        let want = ds.pairs.len().saturating_mul(opts.reg_per_pair);
        let take = want.min(opts.regularizers.len());
        if take > 0 {
            use rand::seq::SliceRandom;
            let mut rng = seeded_rng(derive_seed(spec.seed, "fingerprint/reg-mix"));
            let mut pool: Vec<usize> = (0..opts.regularizers.len()).collect();
            pool.shuffle(&mut rng);
            data.extend(pool[..take].iter().map(|&i| opts.regularizers[i].clone()));
        }
    }
    let mut run = toy_lm::train(base, &data, spec)?;
    run.checkpoint.set_meta("fpvec.inject.scheme", &ds.scheme_id);
    run.checkpoint.set_meta("fpvec.inject.dataset", ds.id());
    Ok(run)
}

/// Exact-prefix match rule: the generated bytes must begin with the expected
/// response.
pub fn match_rule(generated: &[u8], expected: &[u8]) -> bool {
    generated.starts_with(expected)
}

/// Matched fraction, exact over the given outcomes.
pub fn fsr_from_matches(matches: &[bool]) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    matches.iter().filter(|&&m| m).count() as f64 / matches.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerResult {
    /// Trigger bytes (one-char-per-byte encoding in JSON).
    pub trigger: String,
    pub expected: String,
    pub generated: String,
    pub matched: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeParams {
    pub strategy: String,
    pub margin: usize,
}

/// Per-trigger outcomes and the aggregate fingerprint success rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FSRReport {
    pub per_trigger: Vec<TriggerResult>,
    pub fsr: f64,
    pub model_digest: String,
    pub dataset_id: String,
    pub decode_params: DecodeParams,
}

impl FSRReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), json)?;
        Ok(())
    }
}

/// Query the model with every trigger and score exact-prefix matches.
///
/// Triggers are evaluated in parallel; the report preserves dataset order.
/// Per-pair generation failures (e.g. an over-length trigger) are recorded
/// as unmatched rather than aborting the evaluation.
pub fn eval_fsr(model: &Checkpoint, ds: &FingerprintDataset) -> Result<FSRReport> {
    let results: Vec<TriggerResult> = ds
        .pairs
        .par_iter()
        .map(|pair| {
            let generated = toy_lm::generate(model, &pair.trigger, pair.response.len() + DECODE_MARGIN)
                .unwrap_or_default();
            TriggerResult {
                trigger: jsonl::bytes_to_text(&pair.trigger),
                expected: jsonl::bytes_to_text(&pair.response),
                generated: jsonl::bytes_to_text(&generated),
                matched: match_rule(&generated, &pair.response),
            }
        })
        .collect();
    let matches: Vec<bool> = results.iter().map(|r| r.matched).collect();
    Ok(FSRReport {
        per_trigger: results,
        fsr: fsr_from_matches(&matches),
        model_digest: model.digest(),
        dataset_id: ds.id(),
        decode_params: DecodeParams { strategy: "greedy".into(), margin: DECODE_MARGIN },
    })
}
