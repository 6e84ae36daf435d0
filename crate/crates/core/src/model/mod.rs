//! The three classifiers behind one interface.

pub mod cnn3d;
pub mod layers;
pub mod rvn;
pub mod transformer;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scan_io::VoxelVolume;
use crate::tensor::Tensor;

pub use cnn3d::{Cnn3d, Cnn3dConfig};
pub use layers::{apply_bn_updates, BnUpdate, Mode};
pub use rvn::{Rvn, RvnConfig};
pub use transformer::{FrameTransformer, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn3d,
    Rvn,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn3d, ModelKind::Rvn, ModelKind::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnn3d => "cnn3d",
            ModelKind::Rvn => "rvn",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (expected cnn3d, rvn or transformer)")))
    }
}

/// Architecture of one model, tagged by kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Cnn3d(Cnn3dConfig),
    Rvn(RvnConfig),
    Transformer(TransformerConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Cnn3d(_) => ModelKind::Cnn3d,
            ModelConfig::Rvn(_) => ModelKind::Rvn,
            ModelConfig::Transformer(_) => ModelKind::Transformer,
        }
    }

    /// Full-size architecture.
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Cnn3d => ModelConfig::Cnn3d(Cnn3dConfig::default()),
            ModelKind::Rvn => ModelConfig::Rvn(RvnConfig::default()),
            ModelKind::Transformer => ModelConfig::Transformer(TransformerConfig::default()),
        }
    }

    /// Small architecture that trains in minutes on one core from 64³ inputs.
    pub fn desk(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Cnn3d => ModelConfig::Cnn3d(Cnn3dConfig {
                input_shape: [32, 32, 32],
                channels: [4, 8, 8, 16, 16],
                kernel: 3,
                pool: 2,
                dropout: 0.1,
                fc: [32, 16, 1],
            }),
            ModelKind::Rvn => ModelConfig::Rvn(RvnConfig {
                input_shape: [32, 32, 32],
                glimpse_side: 4,
                glimpse_channels: vec![4, 8],
                kernel: 3,
                pool: 2,
                embed_dim: 32,
                hidden: 32,
                steps: 6,
                sigma: 0.2,
                rollouts: 1,
            }),
            ModelKind::Transformer => ModelConfig::Transformer(TransformerConfig {
                n_frames: 16,
                frame_size: [32, 32],
                backbone: vec![vec![8], vec![16], vec![16]],
                d_model: 32,
                heads: 4,
                ff_dim: 64,
            }),
        }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn Classifier>> {
        Ok(match self {
            ModelConfig::Cnn3d(c) => Box::new(Cnn3d::new(c.clone(), seed)?),
            ModelConfig::Rvn(c) => Box::new(Rvn::new(c.clone(), seed)?),
            ModelConfig::Transformer(c) => Box::new(FrameTransformer::new(c.clone(), seed)?),
        })
    }
}

/// A training-mode loss with the side effects the trainer must commit.
pub struct BatchLoss {
    pub loss: Var,
    pub bn_updates: Vec<BnUpdate>,
    /// Named scalar components for logging.
    pub terms: Vec<(&'static str, f64)>,
}

pub trait Classifier {
    fn config(&self) -> ModelConfig;

    fn kind(&self) -> ModelKind {
        self.config().kind()
    }

    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    /// Turn a raw volume into this model's input tensor.
    fn prepare(&self, volume: &VoxelVolume) -> Result<Tensor>;

    /// Scalar loss over a batch of prepared inputs.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        inputs: &[&Tensor],
        labels: &[u8],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchLoss>;

    /// Deterministic probability of class 1 for each input.
    fn predict(&self, inputs: &[&Tensor]) -> Result<Vec<f64>>;

    /// The glimpse network behind this classifier, if it is one.
    fn as_rvn(&self) -> Option<&rvn::Rvn> {
        None
    }
}
