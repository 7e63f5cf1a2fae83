//! A self-contained tiny byte-level autoregressive language model with a
//! from-scratch trainer.
//!
//! The model is small enough to pretrain, fine-tune, and attack on a laptop
//! CPU in minutes, while exposing the same checkpoint surface as a real
//! model: every operation consumes and produces [`Checkpoint`]s, so the
//! delta/merge/prune arithmetic applies to it unchanged.
//!
//! [`Checkpoint`]: crate::tensor_store::Checkpoint

mod data;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{corpus_bytes, read_pairs, write_pairs, SupervisedPair};
pub use model::{
    backward, config_of, eval_pairs, forward_loss, generate, layout, EvalMetrics, Logits,
    CONFIG_META_KEY,
};
pub use train::{
    init_model, init_model_with_dtype, train, write_train_log, OptimizerKind, StepLoss, TrainRun,
    TrainSpec,
};



/// Architecture of the toy model. The vocabulary is the 256 raw bytes plus
/// BOS, EOS, and PAD at the top of the id range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLMConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_context")]
    pub context_len: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_ff")]
    pub d_ff: usize,
}

fn default_vocab() -> usize {
    259
}
fn default_context() -> usize {
    64
}
fn default_d_model() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_ff() -> usize {
    256
}

impl Default for ToyLMConfig {
    fn default() -> Self {
        ToyLMConfig {
            vocab_size: default_vocab(),
            context_len: default_context(),
            d_model: default_d_model(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            d_ff: default_ff(),
        }
    }
}

impl ToyLMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Argument(
                "vocab_size must be at least 4 (three specials plus one byte)".into(),
            ));
        }
        if self.context_len < 8 {
            return Err(Error::Argument("context_len must be at least 8".into()));
        }
        for (label, v) in
            [("d_model", self.d_model), ("n_layers", self.n_layers), ("n_heads", self.n_heads), ("d_ff", self.d_ff)]
        {
            if v == 0 {
                return Err(Error::Argument(format!("{label} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Argument(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn bos(&self) -> usize {
        self.vocab_size - 3
    }

    pub fn eos(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn pad(&self) -> usize {
        self.vocab_size - 1
    }

    /// Largest byte value the vocabulary can encode.
    pub fn max_byte(&self) -> usize {
        self.vocab_size - 4
    }
}
