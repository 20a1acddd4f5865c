//! Conditional v-predictor: conditioning types, the U-Net, the morphology
//! embedder and the checkpoint format.

mod checkpoint;
mod embed;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embed::{embed_morphology, PatchEmbedder};
pub use unet::{TokenSource, Unet, UnetBatch, UnetCache, UnetConfig};

use serde::{Deserialize, Serialize};

use crate::codec::ImageRgb;
use crate::diffusion::LatentGrid;
use crate::error::{Error, Result};

/// The trainable denoiser as used for training and sampling.
pub type DenoiserParams = Unet<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct MorphologyTokens {
    count: usize,
    dim: usize,
    data: Vec<f64>,
}

impl MorphologyTokens {
    pub fn new(count: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != count * dim {
            return Err(Error::ShapeMismatch {
                expected: vec![count, dim],
                got: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite token value".into()));
        }
        Ok(Self { count, dim, data })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Token mean over the sequence, a single `dim` vector.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for row in self.data.chunks_exact(self.dim) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let n = self.count.max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Generation,
    Translation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    mode: TaskMode,
    structural_latent: LatentGrid,
    tokens: MorphologyTokens,
}

impl ConditioningBundle {
    /// Generation mode: all-zero structural latent and the single learned token.
    pub fn generation(generation_token: MorphologyTokens, latent_shape: [usize; 3]) -> Result<Self> {
        if generation_token.count() != 1 {
            return Err(Error::invalid("generation conditioning takes exactly one token"));
        }
        let [c, h, w] = latent_shape;
        Ok(Self {
            mode: TaskMode::Generation,
            structural_latent: LatentGrid::zeros(c, h, w),
            tokens: generation_token,
        })
    }

    /// Translation mode: source latent plus source-derived tokens.
    pub fn translation(structural_latent: LatentGrid, tokens: MorphologyTokens) -> Result<Self> {
        if tokens.count() == 0 {
            return Err(Error::invalid("translation conditioning needs at least one token"));
        }
        Ok(Self {
            mode: TaskMode::Translation,
            structural_latent,
            tokens,
        })
    }

    pub fn mode(&self) -> TaskMode {
        self.mode
    }

    pub fn structural_latent(&self) -> &LatentGrid {
        &self.structural_latent
    }

    pub fn tokens(&self) -> &MorphologyTokens {
        &self.tokens
    }
}

/// Anything that predicts v̂ from a noisy latent, a timestep and conditioning.
///
/// `t = 0` is accepted (first inversion hop evaluates at the clean latent).
pub trait VPredictor {
    fn predict_v_batch(&self, z_t: &[LatentGrid], t: usize, conds: &[&ConditioningBundle]) -> Result<Vec<LatentGrid>>;

    fn predict_v(&self, z_t: &LatentGrid, t: usize, cond: &ConditioningBundle) -> Result<LatentGrid> {
        let mut out = self.predict_v_batch(std::slice::from_ref(z_t), t, &[cond])?;
        Ok(out.remove(0))
    }

    fn generation_conditioning(&self, latent_shape: [usize; 3]) -> Result<ConditioningBundle>;

    fn translation_conditioning(&self, source: &ImageRgb, structural_latent: LatentGrid) -> Result<ConditioningBundle>;
}
