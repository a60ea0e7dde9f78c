//! Artifacts kept in the data directory.
//!
//! ```text
//! <data-dir>/
//!   corpus/            ingested passages, graph and conversations
//!   lexical.json       TF-IDF index
//!   model.ckpt         parameter checkpoint
//!   store.bin          dense passage embeddings
//!   phases.json        completed training phases
//!   loss_log.csv       per-epoch losses of every phase run so far
//!   reports/           eval outputs
//!   .lock              held by commands that write artifacts
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use convqa::corpus::Corpus;
use convqa::dense::EmbeddingStore;
use convqa::lexical::InvertedIndex;
use convqa::model::ModelParams;
use convqa::training::{EpochLog, Phase};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Corpus,
    Lexical,
    Model,
    Store,
}

impl Artifact {
    fn describe(self) -> (&'static str, &'static str) {
        match self {
            Artifact::Corpus => ("ingested corpus", "ingest"),
            Artifact::Lexical => ("lexical index", "index"),
            Artifact::Model => ("model checkpoint", "pretrain"),
            Artifact::Store => ("dense embedding store", "pretrain"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub completed: Vec<Phase>,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.root.join(match a {
            Artifact::Corpus => "corpus",
            Artifact::Lexical => "lexical.json",
            Artifact::Model => "model.ckpt",
            Artifact::Store => "store.bin",
        })
    }

    pub fn phases_path(&self) -> PathBuf {
        self.root.join("phases.json")
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.root.join("loss_log.csv")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn require(&self, a: Artifact) -> anyhow::Result<PathBuf> {
        let p = self.path(a);
        if p.exists() {
            return Ok(p);
        }
        let (what, cmd) = a.describe();
        Err(Failure::new(
            "missing-artifact",
            format!("{what} not found at {} (run `convqa {cmd}` first)", p.display()),
        )
        .into())
    }

    pub fn corpus(&self) -> anyhow::Result<Corpus> {
        Ok(Corpus::load(&self.require(Artifact::Corpus)?)?)
    }

    pub fn lexical(&self) -> anyhow::Result<InvertedIndex> {
        Ok(InvertedIndex::load(&self.require(Artifact::Lexical)?)?)
    }

    pub fn model(&self) -> anyhow::Result<ModelParams> {
        Ok(ModelParams::load(&self.require(Artifact::Model)?)?)
    }

    pub fn store(&self) -> anyhow::Result<EmbeddingStore> {
        Ok(EmbeddingStore::load(&self.require(Artifact::Store)?)?)
    }

    pub fn phases(&self) -> anyhow::Result<PhaseState> {
        let p = self.phases_path();
        if !p.exists() {
            return Ok(PhaseState::default());
        }
        let raw = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn record_phase(&self, phase: Phase) -> anyhow::Result<()> {
        let mut s = self.phases()?;
        if !s.completed.contains(&phase) {
            s.completed.push(phase);
        }
        let p = self.phases_path();
        fs::write(&p, serde_json::to_string_pretty(&s)? + "\n").with_context(|| format!("writing {}", p.display()))
    }

    /// Appends rows to the loss log, writing the header once.
    pub fn append_loss_log(&self, log: &[EpochLog]) -> anyhow::Result<()> {
        let p = self.loss_log_path();
        let csv = convqa::training::loss_log_csv(log);
        let body = if p.exists() {
            csv.split_once('\n').map_or("", |(_, rest)| rest).to_string()
        } else {
            csv
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .with_context(|| format!("opening {}", p.display()))?;
        f.write_all(body.as_bytes()).with_context(|| format!("writing {}", p.display()))
    }

    /// Takes the directory lock. Fails if another writer holds it.
    pub fn lock(&self) -> anyhow::Result<Lock> {
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::new(
                "locked",
                format!("{} is held by another command; remove it if no command is running", path.display()),
            )
            .into()),
            Err(e) => Err(anyhow::Error::new(e).context(format!("creating {}", path.display()))),
        }
    }
}

/// Removes the lock file on drop.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
