//! All trainable parameters and their checkpoint format.
//!
//! A checkpoint is one JSON header line followed by the raw parameter
//! blocks as little-endian `f64`, in header order:
//!
//! ```text
//! {"format":"convqa-checkpoint","version":1,"config":{..},"frozen_p":..,"blocks":[{"name":..,"len":..},..]}\n
//! <f64 LE> ...
//! ```

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::{EncoderParams, Featurizer};
use crate::dhm::AttentionParams;
use crate::error::{Error, Result};
use crate::explorer::GatParams;
use crate::rank_read::{ReadHeads, TokenFeaturizer};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "convqa-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_f: usize,
    pub d_q: usize,
    pub d_t: usize,
    pub gat_heads: [usize; 2],
    pub leaky_slope: f64,
    /// Scale of the perturbation around the identity GAT initialisation.
    pub gat_noise: f64,
    /// Seed for parameter initialisation.
    pub seed: u64,
    /// Seed of the feature hashes.
    pub hash_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_f: 4096,
            d_q: 128,
            d_t: 1024,
            gat_heads: [4, 2],
            leaky_slope: 0.2,
            gat_noise: 0.01,
            seed: 7,
            hash_seed: 1,
        }
    }
}

/// Parameter families, as named in logs, checkpoints and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Wq,
    Wp,
    Wa,
    Gat,
    Wt,
    Wra,
    Ws,
    We,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Wq,
        Family::Wp,
        Family::Wa,
        Family::Gat,
        Family::Wt,
        Family::Wra,
        Family::Ws,
        Family::We,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Wq => "W_q",
            Family::Wp => "W_p",
            Family::Wa => "W_a",
            Family::Gat => "GAT",
            Family::Wt => "W_t",
            Family::Wra => "W_ra",
            Family::Ws => "W_s",
            Family::We => "W_e",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub gat: GatParams,
    pub read: ReadHeads,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    frozen_p: bool,
    blocks: Vec<BlockHeader>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = EncoderParams::new(Featurizer::new(config.d_f, config.hash_seed), config.d_q, &mut rng);
        let attention = AttentionParams::uniform(config.d_q, &mut rng);
        let gat = GatParams::init(config.d_q, config.gat_heads, config.leaky_slope, config.gat_noise, &mut rng)?;
        let read = ReadHeads::init(
            config.d_q,
            TokenFeaturizer {
                dim: config.d_t,
                seed: config.hash_seed.wrapping_add(1),
            },
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            encoder,
            attention,
            gat,
            read,
        })
    }

    /// `(family, name, values)` for every block, in checkpoint order.
    pub fn blocks(&self) -> Vec<(Family, String, &[f64])> {
        let mut out: Vec<(Family, String, &[f64])> = vec![
            (Family::Wq, "w_q".into(), self.encoder.w_q.as_slice()),
            (Family::Wp, "w_p".into(), self.encoder.w_p().as_slice()),
            (Family::Wa, "w_a".into(), self.attention.w_a.as_slice().expect("contiguous")),
        ];
        let names = gat_block_names(&self.gat);
        for (name, block) in names.into_iter().zip(self.gat.blocks()) {
            out.push((Family::Gat, name, block));
        }
        out.push((Family::Wt, "w_t".into(), self.read.w_t.as_slice()));
        out.push((Family::Wra, "w_ra".into(), self.read.w_ra.as_slice().expect("contiguous")));
        out.push((Family::Ws, "w_s".into(), self.read.w_s.as_slice().expect("contiguous")));
        out.push((Family::We, "w_e".into(), self.read.w_e.as_slice().expect("contiguous")));
        out
    }

    /// Mutable visit of every block in checkpoint order. `W_p` is skipped
    /// once frozen.
    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(Family, &mut [f64])) {
        f(Family::Wq, self.encoder.w_q.as_slice_mut());
        if let Ok(w_p) = self.encoder.w_p_mut() {
            f(Family::Wp, w_p.as_slice_mut());
        }
        f(Family::Wa, self.attention.w_a.as_slice_mut().expect("contiguous"));
        self.gat.for_each_mut(|b| f(Family::Gat, b));
        f(Family::Wt, self.read.w_t.as_slice_mut());
        f(Family::Wra, self.read.w_ra.as_slice_mut().expect("contiguous"));
        f(Family::Ws, self.read.w_s.as_slice_mut().expect("contiguous"));
        f(Family::We, self.read.w_e.as_slice_mut().expect("contiguous"));
    }

    /// L2 norm per family, for diagnostics.
    pub fn family_norms(&self) -> Vec<(Family, f64)> {
        let mut acc: std::collections::BTreeMap<Family, f64> = Default::default();
        for (fam, _, block) in self.blocks() {
            *acc.entry(fam).or_default() += block.iter().map(|v| v * v).sum::<f64>();
        }
        acc.into_iter().map(|(f, s)| (f, s.sqrt())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blocks = self.blocks();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            frozen_p: self.encoder.is_frozen(),
            blocks: blocks
                .iter()
                .map(|(_, name, b)| BlockHeader {
                    name: name.clone(),
                    len: b.len(),
                })
                .collect(),
        };
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        for (_, _, b) in &blocks {
            for v in b.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header line missing".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                header.format, header.version
            )));
        }
        let mut params = Self::init(&header.config)?;
        let expected: Vec<(String, usize)> = params.blocks().iter().map(|(_, n, b)| (n.clone(), b.len())).collect();
        let got: Vec<(String, usize)> = header.blocks.iter().map(|b| (b.name.clone(), b.len)).collect();
        if expected != got {
            return Err(Error::Format("checkpoint block layout does not match its config".into()));
        }
        let body = &bytes[newline + 1..];
        let total: usize = got.iter().map(|(_, l)| l).sum();
        if body.len() != total * 8 {
            return Err(Error::Format(format!(
                "checkpoint body has {} bytes, expected {}",
                body.len(),
                total * 8
            )));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        params.for_each_block_mut(|_, block| {
            for v in block.iter_mut() {
                *v = values.next().expect("length checked");
            }
        });
        if header.frozen_p {
            params.encoder.freeze();
        }
        Ok(params)
    }
}

fn gat_block_names(gat: &GatParams) -> Vec<String> {
    let mut names = Vec::new();
    for (l, layer) in gat.layers.iter().enumerate() {
        for h in 0..layer.heads.len() {
            for part in ["w", "a_self", "a_neigh"] {
                names.push(format!("gat.{l}.{h}.{part}"));
            }
        }
    }
    names
}
