//! Inference-time hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which history answers the pipeline may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// The pipeline's own answers from earlier turns.
    #[default]
    Pred,
    /// Gold answers: history questions carry their answer text and gold
    /// passages seed the explorer.
    True,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Pred => "pred",
            Setting::True => "true",
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pred" => Ok(Setting::Pred),
            "true" => Ok(Setting::True),
            other => Err(Error::InvalidArgument(format!("unknown setting `{other}` (pred|true)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub rounds: usize,
    pub n_1: usize,
    pub n_r: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self { rounds: 2, n_1: 3, n_r: 1 }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::InvalidArgument("rounds must be at least 1".into()));
        }
        if self.n_1 < 1 {
            return Err(Error::InvalidArgument("n_1 must be at least 1".into()));
        }
        if self.n_r > self.n_1 {
            return Err(Error::InvalidArgument(format!("n_r ({}) exceeds n_1 ({})", self.n_r, self.n_1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub retrieval: RoundConfig,
    /// Tokens kept from each feedback passage inside a triplet.
    pub feedback_tokens: usize,
    pub n_2: usize,
    pub m: usize,
    pub node_cap: usize,
    pub tfidf_k: usize,
    pub max_seq: usize,
    pub max_answer_len: usize,
    pub top_spans: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            retrieval: RoundConfig::default(),
            feedback_tokens: 64,
            n_2: 5,
            m: 1,
            node_cap: 512,
            tfidf_k: 1,
            max_seq: 384,
            max_answer_len: 30,
            top_spans: 20,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        if self.n_2 < 1 {
            return Err(Error::InvalidArgument("n_2 must be at least 1".into()));
        }
        if self.max_seq < 8 {
            return Err(Error::InvalidArgument("max_seq must be at least 8".into()));
        }
        if self.max_answer_len < 1 || self.top_spans < 1 {
            return Err(Error::InvalidArgument("max_answer_len and top_spans must be positive".into()));
        }
        if self.node_cap < 1 {
            return Err(Error::InvalidArgument("node_cap must be at least 1".into()));
        }
        Ok(())
    }
}
