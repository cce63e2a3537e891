use crate::error::{Result, WiseError};
use crate::numerics::Token;
use crate::side_memory::Aggregation;
use serde::{Deserialize, Serialize};

/// Hyperparameters of the editing stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    /// Upper activation bound for irrelevant queries.
    pub alpha: f64,
    /// Lower activation bound for edit queries.
    pub beta: f64,
    /// Required gap between edit and irrelevant activations.
    pub gamma: f64,
    pub lr: f64,
    pub steps_per_edit: usize,
    pub edits_per_shard: usize,
    /// Shards per side memory.
    pub k: usize,
    /// Mask ratio of each shard.
    pub rho: f64,
    pub n_prefixes: usize,
    pub prefix_len: usize,
    pub irrelevant_batch: usize,
    pub use_memo_loss: bool,
    /// Stop an edit early once its total loss drops below this value.
    pub early_stop_loss: Option<f64>,
    pub aggregation: Aggregation,
    /// After a merge, reset ε to the minimum activation of the absorbed
    /// edit prompts under the merged values.
    pub recompute_epsilon: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 20.0,
            gamma: 10.0,
            lr: 1.0,
            steps_per_edit: 30,
            edits_per_shard: 25,
            k: 2,
            rho: 0.2,
            n_prefixes: 10,
            prefix_len: 10,
            irrelevant_batch: 4,
            use_memo_loss: false,
            early_stop_loss: None,
            aggregation: Aggregation::Mean,
            recompute_epsilon: false,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WiseError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha < self.beta) {
            return bad(format!("need 0 <= alpha < beta, got {} / {}", self.alpha, self.beta));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.k == 0 || self.edits_per_shard == 0 {
            return bad("k and edits_per_shard must be at least 1".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho {} outside (0, 1]", self.rho));
        }
        Ok(())
    }

    /// Edits a side memory absorbs before its shards are merged.
    pub fn edits_per_memory(&self) -> usize {
        self.k * self.edits_per_shard
    }
}

/// One edit request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditExample {
    pub prompt: Vec<Token>,
    pub target: Vec<Token>,
    pub paraphrase: Option<Vec<Token>>,
    /// Unrelated query whose output must stay unchanged.
    pub locality: Vec<Token>,
    /// Answer the unedited model is expected to give, when known.
    pub original: Option<Vec<Token>>,
}

impl EditExample {
    pub fn new(prompt: Vec<Token>, target: Vec<Token>, locality: Vec<Token>) -> Self {
        Self {
            prompt,
            target,
            paraphrase: None,
            locality,
            original: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() || self.target.is_empty() {
            return Err(WiseError::Input("edit prompt and target must be non-empty".into()));
        }
        if self.locality == self.prompt {
            return Err(WiseError::Input("locality probe equals the edit prompt".into()));
        }
        Ok(())
    }

    /// Prompt followed by all but the last target token.
    pub fn training_tokens(&self) -> Vec<Token> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.target[..self.target.len() - 1]);
        seq
    }

    /// Loss mask aligned with [`Self::training_tokens`]: only positions that
    /// predict a target token are scored.
    pub fn training_targets(&self) -> Vec<Option<Token>> {
        let p = self.prompt.len();
        let mut mask = vec![None; p + self.target.len() - 1];
        for (i, &t) in self.target.iter().enumerate() {
            mask[p - 1 + i] = Some(t);
        }
        mask
    }
}
