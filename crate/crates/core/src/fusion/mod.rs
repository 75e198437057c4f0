//! Part-whole fusion of per-modality feature maps.
//!
//! Each modality's features become part capsules, which are collapsed to
//! horizontal and vertical 1-D capsules, routed jointly to whole capsules
//! per axis, and recombined by an outer product over resolution into the
//! shared representation. Each modality's share of the routing coefficients
//! reweights its own part capsules to give its modality-specific details.

mod baselines;
mod capsules;
pub mod routing;

pub use capsules::{
    coefficient_block, concat_parts, disentangle, em_routing, entangle, make_primary_capsules, merge_specifics,
    modal_specific, split_coefficients, Axis, AxisCapsules, CapsuleField, PrimaryCaps, RoutingOutcome, RoutingWeights,
    CAPSULE_DIM, POSE_DIM,
};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::nn::Linear;
use crate::tensor::{Init, ParamId, ParamStore, Tape, Var};
use baselines::BaselineStage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMechanism {
    #[default]
    Pwrf,
    Addition,
    Concatenation,
    Attention,
}

impl FusionMechanism {
    pub const ALL: [FusionMechanism; 4] =
        [FusionMechanism::Pwrf, FusionMechanism::Addition, FusionMechanism::Concatenation, FusionMechanism::Attention];

    pub fn name(self) -> &'static str {
        match self {
            FusionMechanism::Pwrf => "pwrf",
            FusionMechanism::Addition => "addition",
            FusionMechanism::Concatenation => "concatenation",
            FusionMechanism::Attention => "attention",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionConfig {
    pub part_types: usize,
    pub whole_types: usize,
    pub routing_iters: usize,
    pub lambda_schedule: Vec<f64>,
    pub share_params: bool,
    pub mechanism: FusionMechanism,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.part_types == 0 || self.whole_types == 0 {
            return Err(config_err!("capsule type counts must be positive"));
        }
        if self.routing_iters == 0 {
            return Err(config_err!("routing_iters must be at least 1"));
        }
        if self.lambda_schedule.len() < self.routing_iters {
            return Err(config_err!(
                "lambda_schedule has {} entries but routing_iters is {}",
                self.lambda_schedule.len(),
                self.routing_iters
            ));
        }
        Ok(())
    }
}

/// Routing details kept for inspection and export.
#[derive(Clone, Debug)]
pub struct RoutingTrace {
    pub parts_h: Vec<AxisCapsules>,
    pub parts_v: Vec<AxisCapsules>,
    pub horizontal: RoutingOutcome,
    pub vertical: RoutingOutcome,
    /// Per modality, `[H,1,T_p,1]`.
    pub splits_h: Vec<Var>,
    /// Per modality, `[1,W,T_p,1]`.
    pub splits_v: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FusionOutputs {
    /// `[H, W, T_w, 17]` shared whole-level capsules.
    pub shared: CapsuleField,
    /// Per modality, `[H, W, T_p·17]`.
    pub specifics: Vec<Var>,
    /// `[H, W, C]`.
    pub merged_specific: Var,
    /// Present for capsule fusion only.
    pub routing: Option<RoutingTrace>,
}

#[derive(Clone, Debug)]
struct AxisRouting {
    transforms: ParamId,
    beta_u: ParamId,
    beta_a: ParamId,
}

#[derive(Clone, Debug)]
struct CapsuleStage {
    primary: Vec<PrimaryCaps>,
    /// Per branch: logits over columns (horizontal) and rows (vertical).
    reduce: Vec<(ParamId, ParamId)>,
    routing: [AxisRouting; 2],
}

#[derive(Clone, Debug)]
enum StageKind {
    Capsule(CapsuleStage),
    Baseline(BaselineStage),
}

/// Parameters of one fusion stage over `modalities` inputs of shape `[H, W, C]`.
#[derive(Clone, Debug)]
pub struct FusionStage {
    cfg: FusionConfig,
    modalities: usize,
    height: usize,
    width: usize,
    channels: usize,
    kind: StageKind,
    merge: Linear,
}

/// Spread of the identity-plus-noise vote transform initialisation.
const TRANSFORM_INIT_STD: f64 = 0.01;

impl FusionStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &FusionConfig,
        modalities: usize,
        height: usize,
        width: usize,
        channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if modalities == 0 {
            return Err(config_err!("fusion needs at least one modality"));
        }
        let branches = if cfg.share_params { 1 } else { modalities };
        let t_p = cfg.part_types;
        let kind = match cfg.mechanism {
            FusionMechanism::Pwrf => {
                let mut primary = Vec::new();
                let mut reduce = Vec::new();
                for b in 0..branches {
                    primary.push(PrimaryCaps::new(store, &format!("{name}.caps{b}"), channels, t_p)?);
                    reduce.push((
                        store.add(format!("{name}.reduce{b}.h"), &[width], Init::Zeros)?,
                        store.add(format!("{name}.reduce{b}.v"), &[height], Init::Zeros)?,
                    ));
                }
                let mk = |store: &mut ParamStore, axis: &str| -> Result<AxisRouting> {
                    Ok(AxisRouting {
                        transforms: store.add(
                            format!("{name}.route_{axis}.transforms"),
                            &[branches * t_p, cfg.whole_types, POSE_DIM],
                            Init::IdentityPlusNoise(TRANSFORM_INIT_STD),
                        )?,
                        beta_u: store.add(format!("{name}.route_{axis}.beta_u"), &[cfg.whole_types], Init::Zeros)?,
                        beta_a: store.add(format!("{name}.route_{axis}.beta_a"), &[cfg.whole_types], Init::Zeros)?,
                    })
                };
                let routing = [mk(store, "h")?, mk(store, "v")?];
                StageKind::Capsule(CapsuleStage { primary, reduce, routing })
            }
            mech => StageKind::Baseline(BaselineStage::new(store, name, mech, cfg, modalities, branches, channels)?),
        };
        let merge = Linear::new(store, &format!("{name}.merge_specific"), modalities * t_p * CAPSULE_DIM, out_channels)?;
        Ok(Self { cfg: cfg.clone(), modalities, height, width, channels, kind, merge })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    /// Width of the flattened shared representation.
    pub fn shared_width(&self) -> usize {
        self.cfg.whole_types * CAPSULE_DIM
    }

    pub fn specific_width(&self) -> usize {
        self.cfg.part_types * CAPSULE_DIM
    }

    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, features: &[Var]) -> Result<FusionOutputs> {
        if features.len() != self.modalities {
            return Err(dim_err!("fusion stage built for {} modalities, got {}", self.modalities, features.len()));
        }
        for &f in features {
            if tape.shape(f) != [self.height, self.width, self.channels] {
                return Err(dim_err!(
                    "fusion stage expects [{}, {}, {}] features, got {:?}",
                    self.height,
                    self.width,
                    self.channels,
                    tape.shape(f)
                ));
            }
        }
        let (shared, specifics, routing) = match &self.kind {
            StageKind::Capsule(st) => self.fuse_capsules(tape, store, st, features)?,
            StageKind::Baseline(b) => {
                let (shared, specifics) = b.forward(tape, store, features)?;
                (shared, specifics, None)
            }
        };
        let merged_specific = merge_specifics(tape, store, &self.merge, &specifics)?;
        Ok(FusionOutputs { shared, specifics, merged_specific, routing })
    }

    fn fuse_capsules(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        st: &CapsuleStage,
        features: &[Var],
    ) -> Result<(CapsuleField, Vec<Var>, Option<RoutingTrace>)> {
        let t_p = self.cfg.part_types;
        let branch = |n: usize| if self.cfg.share_params { 0 } else { n };
        let mut parts_h = Vec::new();
        let mut parts_v = Vec::new();
        for (n, &f) in features.iter().enumerate() {
            let cf = make_primary_capsules(tape, store, &st.primary[branch(n)], f)?;
            let (lh, lv) = st.reduce[branch(n)];
            let lh = tape.param(store, lh);
            let lv = tape.param(store, lv);
            parts_h.push(disentangle(tape, cf, Axis::Horizontal, lh)?);
            parts_v.push(disentangle(tape, cf, Axis::Vertical, lv)?);
        }
        let mut outcomes = Vec::new();
        for (parts, rw) in [&parts_h, &parts_v].into_iter().zip(&st.routing) {
            let joined = concat_parts(tape, parts)?;
            let mut transforms = tape.param(store, rw.transforms);
            if self.cfg.share_params && self.modalities > 1 {
                transforms = tape.concat(&vec![transforms; self.modalities], 0)?;
            }
            let weights =
                RoutingWeights { transforms, beta_u: tape.param(store, rw.beta_u), beta_a: tape.param(store, rw.beta_a) };
            outcomes.push(em_routing(tape, joined, weights, self.cfg.routing_iters, &self.cfg.lambda_schedule)?);
        }
        let (horizontal, vertical) = (outcomes[0], outcomes[1]);
        let shared = entangle(tape, horizontal.wholes, vertical.wholes)?;
        let mut splits_h = Vec::new();
        let mut splits_v = Vec::new();
        let mut specifics = Vec::new();
        for n in 0..self.modalities {
            let sh = split_coefficients(tape, horizontal.coefficients, Axis::Horizontal, n, t_p)?;
            let sv = split_coefficients(tape, vertical.coefficients, Axis::Vertical, n, t_p)?;
            specifics.push(modal_specific(tape, parts_h[n], parts_v[n], sh, sv)?);
            splits_h.push(sh);
            splits_v.push(sv);
        }
        let trace = RoutingTrace { parts_h, parts_v, horizontal, vertical, splits_h, splits_v };
        Ok((shared, specifics, Some(trace)))
    }
}
