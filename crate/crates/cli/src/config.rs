//! Run configuration file.
//!
//! A flat TOML file of `key = value` pairs, with one optional table per
//! training phase:
//!
//! ```toml
//! seed = 7
//! d = 128
//! n_1 = 3
//! n_2 = 5
//!
//! [joint]
//! lr = 1.0
//! epochs = 10
//! ```
//!
//! Every key is optional; absent keys keep their defaults.

use std::path::Path;

use anyhow::Context;
use convqa::config::PipelineConfig;
use convqa::model::ModelConfig;
use convqa::training::{Phase, ScheduleConfig, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOverrides {
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub max_grad_norm: Option<f64>,
    pub pseudo_queries: Option<usize>,
    pub grad_check: Option<bool>,
}

impl PhaseOverrides {
    fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.max_grad_norm {
            c.max_grad_norm = (v > 0.0).then_some(v);
        }
        if let Some(v) = self.pseudo_queries {
            c.pseudo_queries = v;
        }
        if let Some(v) = self.grad_check {
            c.grad_check = v;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    /// Dense dimension `d_q`.
    pub d: Option<usize>,
    pub d_f: Option<usize>,
    pub d_t: Option<usize>,
    pub n_1: Option<usize>,
    pub n_2: Option<usize>,
    pub n_r: Option<usize>,
    pub m: Option<usize>,
    pub rounds: Option<usize>,
    pub feedback_tokens: Option<usize>,
    pub tfidf_k: Option<usize>,
    pub node_cap: Option<usize>,
    pub max_seq: Option<usize>,
    pub max_answer_len: Option<usize>,
    pub top_spans: Option<usize>,
    pub strip_articles: Option<bool>,
    /// Every n-th conversation is held out of training and evaluated;
    /// 0 trains and evaluates on everything.
    pub holdout_every: Option<usize>,
    pub pretrain: Option<PhaseOverrides>,
    pub joint: Option<PhaseOverrides>,
    pub dhm: Option<PhaseOverrides>,
    pub explorer: Option<PhaseOverrides>,
}

/// Effective settings of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub schedule: ScheduleConfig,
    pub strip_articles: bool,
    pub holdout_every: usize,
}

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_HOLDOUT: usize = 5;

impl Settings {
    pub fn resolve(file: &ConfigFile, seed_flag: Option<u64>) -> anyhow::Result<Self> {
        let seed = seed_flag.or(file.seed).unwrap_or(DEFAULT_SEED);
        let mut model = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        set(&mut model.d_q, file.d);
        set(&mut model.d_f, file.d_f);
        set(&mut model.d_t, file.d_t);

        let mut pipeline = PipelineConfig::default();
        set(&mut pipeline.retrieval.n_1, file.n_1);
        set(&mut pipeline.retrieval.n_r, file.n_r);
        set(&mut pipeline.retrieval.rounds, file.rounds);
        set(&mut pipeline.n_2, file.n_2);
        set(&mut pipeline.m, file.m);
        set(&mut pipeline.feedback_tokens, file.feedback_tokens);
        set(&mut pipeline.tfidf_k, file.tfidf_k);
        set(&mut pipeline.node_cap, file.node_cap);
        set(&mut pipeline.max_seq, file.max_seq);
        set(&mut pipeline.max_answer_len, file.max_answer_len);
        set(&mut pipeline.top_spans, file.top_spans);
        pipeline.validate()?;

        let mut schedule = ScheduleConfig::default();
        for (phase, o) in [
            (Phase::Pretrain, &file.pretrain),
            (Phase::Joint, &file.joint),
            (Phase::Dhm, &file.dhm),
            (Phase::Explorer, &file.explorer),
        ] {
            let c = schedule.phase_mut(phase);
            c.seed = seed;
            if let Some(o) = o {
                o.apply(c);
            }
            c.validate().with_context(|| format!("[{}] table", phase.name()))?;
        }

        Ok(Self {
            seed,
            model,
            pipeline,
            schedule,
            strip_articles: file.strip_articles.unwrap_or(false),
            holdout_every: file.holdout_every.unwrap_or(DEFAULT_HOLDOUT),
        })
    }

    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> anyhow::Result<Self> {
        let file = match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&raw).map_err(|e| crate::Failure::new("config", format!("{}: {}", p.display(), e.message())))?
            }
            None => ConfigFile::default(),
        };
        Self::resolve(&file, seed_flag)
    }

    pub fn is_held_out(&self, conv: usize) -> bool {
        self.holdout_every > 0 && conv % self.holdout_every == self.holdout_every - 1
    }
}

fn set(slot: &mut usize, v: Option<usize>) {
    if let Some(v) = v {
        *slot = v;
    }
}
