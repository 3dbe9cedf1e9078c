//! Versioned JSON checkpoints with bit-exact parameter round trips.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{NestedNetwork, StagePlan};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::output::{to_json, write_atomic};
use crate::train::{SeedRun, TrainConfig, SHUFFLE_STREAM};

pub const FORMAT: &str = "nestnet-checkpoint";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 generator; the word position is kept as a decimal
/// string because JSON numbers cannot hold a `u128`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub plan: StagePlan,
    pub params: Vec<f64>,
    pub rng: RngState,
    pub optimizer_state: OptimizerState,
    /// Resolved training configuration, when the network came from `train`.
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn from_run(run: &SeedRun, config: &TrainConfig) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            plan: run.net.plan().clone(),
            params: run.net.params().to_vec(),
            rng: RngState {
                seed: run.history.seed,
                stream: SHUFFLE_STREAM,
                word_pos: run.shuffle_word_pos.to_string(),
            },
            optimizer_state: run.state.clone(),
            config: Some(config.clone()),
        }
    }

    pub fn network(&self) -> Result<NestedNetwork> {
        NestedNetwork::with_params(&self.plan, Some(self.params.clone()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint parameter {i}")));
        }
        to_json(self)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt_err = |msg: String| Error::Format { path: path.into(), msg };
        let ckpt: Checkpoint = serde_json::from_slice(bytes).map_err(|e| fmt_err(e.to_string()))?;
        if ckpt.format != FORMAT {
            return Err(fmt_err(format!("not a checkpoint (format `{}`)", ckpt.format)));
        }
        if ckpt.version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        ckpt.rng
            .word_pos
            .parse::<u128>()
            .map_err(|_| fmt_err(format!("bad rng word position `{}`", ckpt.rng.word_pos)))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
