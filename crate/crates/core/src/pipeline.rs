//! Trained model bundle: frozen autoencoder plus denoiser, from scene to
//! gray radio map.

use std::path::Path;

use candle_core::{DType, Device};
use ndarray::Array2;
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig, BackboneError};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffusion::{sample_batch, DdmSchedule, DiffusionError};
use crate::domain::{EnvironmentScene, PromptTensor};
use crate::ingest::build_prompt;
use crate::nn::ParamStore;
use crate::training::{vae_from_checkpoint, DiffusionObjective, TrainError};
use crate::vae::{Vae, VaeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("scene size {found} does not match the model's {expected}")]
    SceneSize { expected: usize, found: usize },
}

type Result<T> = std::result::Result<T, PipelineError>;

pub struct RadioMapModel {
    vae: Vae,
    backbone: Backbone,
    latent_scale: f64,
}

impl RadioMapModel {
    pub fn new(vae: Vae, backbone: Backbone, latent_scale: f64) -> Self {
        Self {
            vae,
            backbone,
            latent_scale,
        }
    }

    /// Frozen copy of a training objective's current weights.
    pub fn from_objective(obj: &DiffusionObjective) -> Result<Self> {
        let store = ParamStore::from_tensors(obj.backbone().params()?, DType::F32, &Device::Cpu, false);
        let backbone = Backbone::new(obj.backbone().config().clone(), &store)?;
        Ok(Self::new(obj.vae().clone(), backbone, obj.latent_scale()))
    }

    /// Loads a `diffusion` checkpoint, which embeds its autoencoder.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("diffusion")?;
        let model = &ck.config["model"];
        let vae = vae_from_checkpoint(ck, "vae.", &model["vae"])?;
        let cfg: BackboneConfig = serde_json::from_value(model["backbone"].clone())
            .map_err(|e| CheckpointError::Malformed(format!("backbone config: {e}")))?;
        let latent_scale = model["latent_scale"]
            .as_f64()
            .ok_or_else(|| CheckpointError::Malformed("missing latent_scale".into()))?;
        let store = ParamStore::from_tensors(ck.section("param."), DType::F32, &Device::Cpu, false);
        let backbone = Backbone::new(cfg, &store)?;
        if let Some(extra) = store.unused().first() {
            return Err(CheckpointError::Malformed(format!("unexpected tensor param.{extra}")).into());
        }
        Ok(Self::new(vae, backbone, latent_scale))
    }

    pub fn vae(&self) -> &Vae {
        &self.vae
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn image_size(&self) -> usize {
        self.backbone.config().image_size()
    }

    /// Gray map for one scene after `steps` reverse steps.
    pub fn infer(&self, scene: &EnvironmentScene, steps: usize, seed: u64) -> Result<Array2<f64>> {
        Ok(self.infer_batch(&[scene], steps, &[seed])?.remove(0))
    }

    pub fn infer_batch(&self, scenes: &[&EnvironmentScene], steps: usize, seeds: &[u64]) -> Result<Vec<Array2<f64>>> {
        let prompts: Vec<PromptTensor> = scenes
            .iter()
            .map(|s| {
                if s.size() != self.image_size() {
                    Err(PipelineError::SceneSize {
                        expected: self.image_size(),
                        found: s.size(),
                    })
                } else {
                    Ok(build_prompt(s))
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&PromptTensor> = prompts.iter().collect();
        let schedule = DdmSchedule {
            infer_steps: steps,
            ..DdmSchedule::default()
        };
        let latents = sample_batch(&self.backbone, &refs, &schedule, seeds)?;
        let z: Vec<_> = latents
            .into_iter()
            .map(|l| l.into_data() / self.latent_scale)
            .collect();
        Ok(self.vae.decode_batch(&z)?)
    }
}
