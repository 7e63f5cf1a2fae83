//! Synthetic byte-pattern tasks standing in for real instruction corpora.
//!
//! Three generator families cover the downstream-adaptation roles: string
//! reversal, single-digit modular addition, and template-echo completion.
//! All are deterministic in the spec seed, so corpora never need to be
//! shipped, only described.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, seeded_rng};
use crate::toy_lm::SupervisedPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusTask {
    /// `rev:<word>=` -> reversed word.
    Reverse,
    /// `add:<a>+<b>=` -> `(a+b) % 10` for single digits.
    AddMod10,
    /// `say:<word>!` -> the word itself.
    CopyTemplate,
}

/// Description of one generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub name: String,
    pub task: CorpusTask,
    pub n_pairs: usize,
    pub seed: u64,
    /// Payload length range for word-based tasks (inclusive).
    #[serde(default = "default_min_payload")]
    pub min_payload: usize,
    #[serde(default = "default_max_payload")]
    pub max_payload: usize,
}

fn default_min_payload() -> usize {
    3
}
fn default_max_payload() -> usize {
    8
}

impl CorpusSpec {
    pub fn new(name: impl Into<String>, task: CorpusTask, n_pairs: usize, seed: u64) -> Self {
        CorpusSpec {
            name: name.into(),
            task,
            n_pairs,
            seed,
            min_payload: default_min_payload(),
            max_payload: default_max_payload(),
        }
    }
}

fn random_word(rng: &mut impl Rng, min: usize, max: usize) -> Vec<u8> {
    let len = rng.gen_range(min..=max);
    (0..len).map(|_| b'a' + rng.gen_range(0..26u8)).collect()
}

/// Generate the corpus described by `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Vec<SupervisedPair> {
    let mut rng = seeded_rng(derive_seed(spec.seed, &format!("corpus/{}", spec.name)));
    (0..spec.n_pairs)
        .map(|_| match spec.task {
            CorpusTask::Reverse => {
                let word = random_word(&mut rng, spec.min_payload, spec.max_payload);
                let mut prompt = b"rev:".to_vec();
                prompt.extend_from_slice(&word);
                prompt.push(b'=');
                let completion: Vec<u8> = word.iter().rev().copied().collect();
                SupervisedPair::new(prompt, completion)
            }
            CorpusTask::AddMod10 => {
                let a = rng.gen_range(0..10u8);
                let b = rng.gen_range(0..10u8);
                let prompt = format!("add:{a}+{b}=").into_bytes();
                let completion = vec![b'0' + (a + b) % 10];
                SupervisedPair::new(prompt, completion)
            }
            CorpusTask::CopyTemplate => {
                let word = random_word(&mut rng, spec.min_payload, spec.max_payload);
                let mut prompt = b"say:".to_vec();
                prompt.extend_from_slice(&word);
                prompt.push(b'!');
                SupervisedPair::new(prompt, word)
            }
        })
        .collect()
}
