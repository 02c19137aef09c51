//! Run configuration: one JSON document merging model, training, decoding
//! and codec settings. Its hash is stamped into checkpoints so a resume under
//! a silently edited config fails loudly instead of diverging.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::runtime::decode::DecodeConfig;
use crate::runtime::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub codec: CodecSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk_default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            codec: CodecSpec::desk_default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.codec.validate()?;
        if self.codec.num_codebooks != self.model.num_codebooks {
            return Err(Error::Config(format!(
                "codec has {} codebooks, model expects {}",
                self.codec.num_codebooks, self.model.num_codebooks
            )));
        }
        if self.codec.codebook_size != self.model.code_vocab {
            return Err(Error::Config(format!(
                "codec codebook size {} vs model code vocabulary {}",
                self.codec.codebook_size, self.model.code_vocab
            )));
        }
        if self.codec.feature_dim != self.model.feature_dim {
            return Err(Error::Config(format!(
                "codec feature dim {} vs model feature dim {}",
                self.codec.feature_dim, self.model.feature_dim
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 over everything that pins the optimization trajectory.
    /// Run length, checkpoint cadence and decode settings are excluded on
    /// purpose: a finished run may be resumed and extended, and decoding
    /// choices never touch training.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct TrajectoryKey<'a> {
            model: &'a ModelConfig,
            codec: &'a CodecSpec,
            alpha: f64,
            batch_size: usize,
            schedule: &'a crate::numerics::optim::LrSchedule,
            grad_clip: f64,
            weight_decay: f64,
            seed: u64,
        }
        let key = TrajectoryKey {
            model: &self.model,
            codec: &self.codec,
            alpha: self.train.alpha,
            batch_size: self.train.batch_size,
            schedule: &self.train.schedule,
            grad_clip: self.train.grad_clip,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
        };
        let json = serde_json::to_string(&key).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Parse and validate a config file. Malformed JSON or failed validation
    /// is a configuration error (exit 2), a missing file an I/O error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
