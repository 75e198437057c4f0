//! Multi-modal semantic segmentation head on top of capsule fusion.
//!
//! Stage-1 features of all modalities are merged by concatenation; stage 2 is
//! fused. The shared representation, noise-gated per-modality specifics and
//! a max-selected auxiliary stream interact through three attention branches,
//! are joined with the primary modality, and are classified per pixel.

use crate::backbone::{stage_extent, Backbone};
use crate::config::{PipelineConfig, INPUT_CHANNELS};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::fusion::{CapsuleField, FusionOutputs, FusionStage};
use crate::nn::{concat_project, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Flattens `[H,W,T_w,17]` whole capsules and projects them to `proj.cout` channels.
pub fn shared_to_features(tape: &mut Tape, store: &ParamStore, proj: &Linear, wp: CapsuleField) -> Result<Var> {
    let s = tape.shape(wp.grid).to_vec();
    if s.len() != 4 {
        return Err(dim_err!("whole capsules must be [H,W,T,17], got {s:?}"));
    }
    let flat = tape.reshape(wp.grid, &[s[0], s[1], s[2] * s[3]])?;
    proj.forward(tape, store, flat)
}

/// `sigmoid(gate) ⊙ f + f`.
pub fn gated_residual(tape: &mut Tape, gate: Var, f: Var) -> Result<Var> {
    let g = tape.sigmoid(gate)?;
    let gf = tape.mul(g, f)?;
    tape.add(gf, f)
}

/// Denoises one modality's specific details: the gate comes from the
/// modality's own features, the value from the shared features, both joined
/// with the specific details.
pub fn primitive_specific(
    tape: &mut Tape,
    store: &ParamStore,
    gate_proj: &Linear,
    value_proj: &Linear,
    f_n: Var,
    sp_n: Var,
    shared: Var,
) -> Result<Var> {
    let (fs, ss, ps) = (tape.shape(f_n), tape.shape(shared), tape.shape(sp_n));
    if fs != ss || ps.len() != 3 || ps[..2] != fs[..2] {
        return Err(contract_err!("primitive_specific shapes: features {fs:?}, shared {ss:?}, specific {ps:?}"));
    }
    let gate = concat_project(tape, store, gate_proj, &[f_n, sp_n])?;
    let value = concat_project(tape, store, value_proj, &[shared, sp_n])?;
    gated_residual(tape, gate, value)
}

/// `sigmoid(affine(channel_max(cp1 + cp2 + cp3)))`, shape `[H,W,1]`.
pub fn spatial_attention(tape: &mut Tape, store: &ParamStore, affine: &Linear, cps: [Var; 3]) -> Result<Var> {
    let s = tape.add(cps[0], cps[1])?;
    let s = tape.add(s, cps[2])?;
    let m = tape.channel_max_pool(s)?;
    let a = affine.forward(tape, store, m)?;
    tape.sigmoid(a)
}

/// `sigmoid(proj(global_max(cp1 ⊙ sa + cp1)))`, shape `[1,1,C]`.
pub fn channel_attention(tape: &mut Tape, store: &ParamStore, proj: &Linear, cp1: Var, sa: Var) -> Result<Var> {
    let x = gated_sum(tape, cp1, sa)?;
    let m = tape.global_max_pool(x)?;
    let a = proj.forward(tape, store, m)?;
    tape.sigmoid(a)
}

/// Residual channel gating `cp1 ⊙ ca + cp1`.
pub fn attend(tape: &mut Tape, cp1: Var, ca: Var) -> Result<Var> {
    gated_sum(tape, cp1, ca)
}

fn gated_sum(tape: &mut Tape, x: Var, gate: Var) -> Result<Var> {
    let g = tape.mul(x, gate)?;
    tape.add(g, x)
}

/// Elementwise product and sum of the three branches, concatenated and projected.
pub fn interaction_merge(tape: &mut Tape, store: &ParamStore, proj: &Linear, branches: [Var; 3]) -> Result<Var> {
    let p = tape.mul(branches[0], branches[1])?;
    let p = tape.mul(p, branches[2])?;
    let s = tape.add(branches[0], branches[1])?;
    let s = tape.add(s, branches[2])?;
    concat_project(tape, store, proj, &[p, s])
}

/// Converts an `[H,W]` (or `[H,W,1]`) class-id map to per-pixel labels.
pub fn class_labels(gt: &Tensor, classes: usize) -> Result<Vec<usize>> {
    gt.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(contract_err!("class map holds non-integer or negative value {v}"));
            }
            let c = v as usize;
            if c >= classes {
                return Err(contract_err!("class id {c} out of range for {classes} classes"));
            }
            Ok(c)
        })
        .collect()
}

/// Online-hard-example-mined cross-entropy of `[H,W,K]` logits against a class map.
pub fn ohem_cross_entropy(tape: &mut Tape, logits: Var, gt: &Tensor, keep_fraction: f64, min_kept: usize) -> Result<Var> {
    let k = *tape.shape(logits).last().expect("rank >= 1");
    let labels = class_labels(gt, k)?;
    tape.ohem_cross_entropy(logits, &labels, keep_fraction, min_kept)
}

#[derive(Clone, Debug)]
struct Branch {
    sa: Linear,
    ca: Linear,
}

#[derive(Clone, Debug)]
pub struct SmmModel {
    size: usize,
    channels: usize,
    classes: usize,
    share_params: bool,
    backbones: Vec<Backbone>,
    stage1_merge: Linear,
    fusion: FusionStage,
    shared_proj: Linear,
    psg_gate: Vec<Linear>,
    psg_value: Vec<Linear>,
    psg_merge: Linear,
    selector: Linear,
    branches: Vec<Branch>,
    interact: Linear,
    primary_join: Linear,
    classifier: Linear,
}

#[derive(Clone, Debug)]
pub struct SmmForward {
    /// `[H, W, K]`.
    pub logits: Var,
    pub fusion: FusionOutputs,
}

impl SmmModel {
    pub const STAGES: usize = 2;

    pub fn new(store: &mut ParamStore, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.modalities.len();
        if !(2..=3).contains(&m) {
            return Err(config_err!("segmentation needs 2 or 3 modalities, got {m}"));
        }
        let c = cfg.channels;
        let size = cfg.size();
        let fc = cfg.fusion_config();
        let branch_count = if cfg.share_params { 1 } else { m };
        let backbones = (0..m)
            .map(|n| Backbone::new(store, &format!("smm.backbone{n}"), INPUT_CHANNELS, c, Self::STAGES))
            .collect::<Result<Vec<_>>>()?;
        let s2 = stage_extent(size, Self::STAGES);
        let stage1_merge = Linear::new(store, "smm.stage1.merge", m * c, c)?;
        let fusion = FusionStage::new(store, "smm.stage2.fusion", &fc, m, s2, s2, c, c)?;
        let shared_proj = Linear::new(store, "smm.stage2.shared", fusion.shared_width(), c)?;
        let sp_w = fusion.specific_width();
        let mut psg_gate = Vec::new();
        let mut psg_value = Vec::new();
        for b in 0..branch_count {
            psg_gate.push(Linear::new(store, &format!("smm.stage2.psg{b}.gate"), c + sp_w, c)?);
            psg_value.push(Linear::new(store, &format!("smm.stage2.psg{b}.value"), c + sp_w, c)?);
        }
        let psg_merge = Linear::new(store, "smm.stage2.psg_merge", m * c, c)?;
        let selector = Linear::new(store, "smm.stage2.select", c, c)?;
        let branches = (0..3)
            .map(|b| {
                Ok(Branch {
                    sa: Linear::new(store, &format!("smm.stage2.branch{b}.sa"), 1, 1)?,
                    ca: Linear::new(store, &format!("smm.stage2.branch{b}.ca"), c, c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let interact = Linear::new(store, "smm.stage2.interact", 2 * c, c)?;
        let primary_join = Linear::new(store, "smm.stage2.primary_join", 2 * c, c)?;
        let classifier = Linear::new(store, "smm.head", 2 * c, cfg.classes)?;
        Ok(Self {
            size,
            channels: c,
            classes: cfg.classes,
            share_params: cfg.share_params,
            backbones,
            stage1_merge,
            fusion,
            shared_proj,
            psg_gate,
            psg_value,
            psg_merge,
            selector,
            branches,
            interact,
            primary_join,
            classifier,
        })
    }

    pub fn modalities(&self) -> usize {
        self.backbones.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `inputs` holds one `[H,W,3]` image per selected modality, primary first.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Tensor]) -> Result<SmmForward> {
        let m = self.modalities();
        if inputs.len() != m {
            return Err(dim_err!("model expects {m} modalities, got {}", inputs.len()));
        }
        let mut s1 = Vec::with_capacity(m);
        let mut s2 = Vec::with_capacity(m);
        for (bb, x) in self.backbones.iter().zip(inputs) {
            if x.shape() != [self.size, self.size, INPUT_CHANNELS] {
                return Err(dim_err!(
                    "modality image must be [{0}, {0}, {INPUT_CHANNELS}], got {1:?}",
                    self.size,
                    x.shape()
                ));
            }
            let xv = tape.constant(x.clone());
            let feats = bb.forward(tape, store, xv)?;
            s1.push(feats[0]);
            s2.push(feats[1]);
        }
        let stage1 = concat_project(tape, store, &self.stage1_merge, &s1)?;

        let fusion = self.fusion.fuse(tape, store, &s2)?;
        let shared = shared_to_features(tape, store, &self.shared_proj, fusion.shared)?;
        let mut psg = Vec::with_capacity(m);
        for n in 0..m {
            let b = if self.share_params { 0 } else { n };
            psg.push(primitive_specific(
                tape,
                store,
                &self.psg_gate[b],
                &self.psg_value[b],
                s2[n],
                fusion.specifics[n],
                shared,
            )?);
        }
        let psg = concat_project(tape, store, &self.psg_merge, &psg)?;
        let aux = self.select_auxiliary(tape, &s2[1..])?;
        let sqh = self.selector.forward(tape, store, aux)?;

        let streams = [shared, psg, sqh];
        let mut attended = [shared; 3];
        for (b, branch) in self.branches.iter().enumerate() {
            let cps = [streams[b], streams[(b + 1) % 3], streams[(b + 2) % 3]];
            let sa = spatial_attention(tape, store, &branch.sa, cps)?;
            let ca = channel_attention(tape, store, &branch.ca, cps[0], sa)?;
            attended[b] = attend(tape, cps[0], ca)?;
        }
        let unified = interaction_merge(tape, store, &self.interact, attended)?;
        let stage2 = concat_project(tape, store, &self.primary_join, &[unified, s2[0]])?;

        let up1 = tape.bilinear_upsample(stage1, self.size, self.size)?;
        let up2 = tape.bilinear_upsample(stage2, self.size, self.size)?;
        let logits = concat_project(tape, store, &self.classifier, &[up1, up2])?;
        Ok(SmmForward { logits, fusion })
    }

    /// Elementwise maximum over the auxiliary modalities' features.
    fn select_auxiliary(&self, tape: &mut Tape, aux: &[Var]) -> Result<Var> {
        if aux.len() == 1 {
            return Ok(aux[0]);
        }
        let s = tape.shape(aux[0]).to_vec();
        let stacked: Vec<Var> = aux.iter().map(|&a| tape.reshape(a, &[s[0], s[1], 1, s[2]])).collect::<Result<_>>()?;
        let cat = tape.concat(&stacked, 2)?;
        let mx = tape.max_axes(cat, &[2])?;
        tape.reshape(mx, &[s[0], s[1], self.channels])
    }

    /// Per-pixel argmax class ids, row-major.
    pub fn predict(logits: &Tensor) -> Vec<usize> {
        let k = *logits.shape().last().expect("rank >= 1");
        logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;

    fn small_cfg() -> PipelineConfig {
        let mut c = PipelineConfig::new(Task::Smm, 4);
        c.channels = 6;
        c.part_types = 2;
        c.size = Some(8);
        c
    }

    #[test]
    fn logits_shape() {
        let mut cfg = small_cfg();
        cfg.size = Some(16);
        let mut store = ParamStore::new(cfg.seed);
        let model = SmmModel::new(&mut store, &cfg).unwrap();
        let inputs: Vec<Tensor> =
            (0..3).map(|n| Tensor::from_fn([16, 16, 3], |i| ((i[0] + n * i[1] + i[2]) % 5) as f64 * 0.2).unwrap()).collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &inputs).unwrap();
        assert_eq!(tape.shape(out.logits), &[16, 16, 4]);
        assert!(matches!(model.forward(&mut tape, &store, &inputs[..2]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn gate_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_fn([2, 2, 3], |i| (i[0] + i[1]) as f64 - i[2] as f64).unwrap());
        let zero = tape.constant(Tensor::zeros([2, 2, 3]));
        let out = gated_residual(&mut tape, zero, f).unwrap();
        let expect: Vec<f64> = tape.value(f).data().iter().map(|v| 1.5 * v).collect();
        assert_eq!(tape.value(out).data(), &expect[..]);
        let closed = tape.constant(Tensor::full([2, 2, 3], -800.0));
        let out = gated_residual(&mut tape, closed, f).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(f)) < 1e-300);

        let ca1 = tape.constant(Tensor::ones([1, 1, 3]));
        let out = attend(&mut tape, f, ca1).unwrap();
        let expect: Vec<f64> = tape.value(f).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(out).data(), &expect[..]);
    }

    #[test]
    fn spatial_attention_is_symmetric_in_later_branches() {
        let mut store = ParamStore::new(0);
        let aff = Linear::new(&mut store, "sa", 1, 1).unwrap();
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, k: usize| {
            tape.constant(Tensor::from_fn([3, 2, 4], |i| ((i[0] * 7 + i[1] * 3 + i[2] + k) % 5) as f64).unwrap())
        };
        let (a, b, c) = (mk(&mut tape, 0), mk(&mut tape, 1), mk(&mut tape, 2));
        let s1 = spatial_attention(&mut tape, &store, &aff, [a, b, c]).unwrap();
        let s2 = spatial_attention(&mut tape, &store, &aff, [a, c, b]).unwrap();
        assert_eq!(tape.value(s1), tape.value(s2));
        assert!(tape.value(s1).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn interaction_merge_with_identity_blocks() {
        let mut store = ParamStore::new(0);
        let proj = Linear::new(&mut store, "m", 4, 4).unwrap();
        let eye = Tensor::from_fn([4, 4], |i| f64::from(u8::from(i[0] == i[1]))).unwrap();
        store.set(proj.w, eye).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 2], |i| (i[1] * 2 + i[2]) as f64 - 1.5).unwrap());
        let out = interaction_merge(&mut tape, &store, &proj, [x, x, x]).unwrap();
        let xv = tape.value(x).data().to_vec();
        let o = tape.value(out).data();
        for p in 0..2 {
            for c in 0..2 {
                let v = xv[p * 2 + c];
                assert_eq!(o[p * 4 + c], v * v * v);
                assert_eq!(o[p * 4 + 2 + c], 3.0 * v);
            }
        }
    }

    #[test]
    fn class_labels_validate() {
        let gt = Tensor::new([2, 2], vec![0.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(class_labels(&gt, 4).unwrap(), vec![0, 1, 3, 2]);
        assert!(matches!(class_labels(&gt, 3), Err(crate::Error::Contract(_))));
        let frac = Tensor::new([1], vec![0.5]).unwrap();
        assert!(class_labels(&frac, 3).is_err());
    }
}
