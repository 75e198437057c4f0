//! Task-agnostic wrapper over the segmentation and saliency models.

use crate::config::{PipelineConfig, Task};
use crate::error::{dim_err, Result};
use crate::fusion::FusionOutputs;
use crate::smm::{ohem_cross_entropy, SmmModel};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::vdt::{saliency_loss, VdtModel};

#[derive(Clone, Debug)]
pub enum Model {
    Smm(SmmModel),
    Vdt(VdtModel),
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Segmentation: `[H,W,K]` logits. Saliency: the final `[H,W,1]` map.
    pub prediction: Var,
    /// Every saliency side map, final last. Empty for segmentation.
    pub maps: Vec<Var>,
    /// One entry per fusion stage, shallowest first.
    pub fusion: Vec<FusionOutputs>,
}

impl Model {
    /// Builds the model for `cfg` with parameters initialised from `cfg.seed`.
    pub fn build(cfg: &PipelineConfig) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let model = match cfg.task {
            Task::Smm => Model::Smm(SmmModel::new(&mut store, cfg)?),
            Task::Vdt => Model::Vdt(VdtModel::new(&mut store, cfg)?),
        };
        Ok((model, store))
    }

    pub fn task(&self) -> Task {
        match self {
            Model::Smm(_) => Task::Smm,
            Model::Vdt(_) => Task::Vdt,
        }
    }

    /// Side length of the square input images.
    pub fn size(&self) -> usize {
        match self {
            Model::Smm(m) => m.size(),
            Model::Vdt(m) => m.size(),
        }
    }

    pub fn modalities(&self) -> usize {
        match self {
            Model::Smm(m) => m.modalities(),
            Model::Vdt(m) => m.modalities(),
        }
    }

    /// Values per pixel of the prediction: `K` logits or one saliency value.
    pub fn output_channels(&self) -> usize {
        match self {
            Model::Smm(m) => m.classes(),
            Model::Vdt(_) => 1,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Tensor]) -> Result<ModelOutput> {
        match self {
            Model::Smm(m) => {
                let out = m.forward(tape, store, inputs)?;
                Ok(ModelOutput { prediction: out.logits, maps: Vec::new(), fusion: vec![out.fusion] })
            }
            Model::Vdt(m) => {
                let out = m.forward(tape, store, inputs)?;
                Ok(ModelOutput { prediction: out.final_map(), maps: out.maps, fusion: out.fusion })
            }
        }
    }

    /// Training loss of a forward pass against the scene labels.
    pub fn loss(&self, tape: &mut Tape, out: &ModelOutput, labels: &Tensor, cfg: &PipelineConfig) -> Result<Var> {
        match self {
            Model::Smm(_) => ohem_cross_entropy(tape, out.prediction, labels, cfg.keep_fraction, cfg.min_kept),
            Model::Vdt(_) => {
                if out.maps.is_empty() {
                    return Err(dim_err!("saliency forward produced no maps"));
                }
                saliency_loss(tape, &out.maps, labels)
            }
        }
    }
}
