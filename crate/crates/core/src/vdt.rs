//! Triple-modal salient object detection on top of capsule fusion.
//!
//! Fusion runs at every backbone stage, giving a ladder of shared and
//! specific features. Two stacked sub-decoders climb the ladder with
//! adjacent-scale attention blocks; the shallowest output of the first one
//! guides every stage of the second. Five sigmoid maps are supervised.

use crate::backbone::{stage_extent, Backbone};
use crate::config::{PipelineConfig, INPUT_CHANNELS};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::fusion::{FusionOutputs, FusionStage};
use crate::nn::{concat_project, Cbr, Conv3x3, Linear, Norm};
use crate::smm::shared_to_features;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Generator index of the visible modality, the source of edge cues.
pub const VISIBLE: usize = 0;
/// Generator index of the depth modality, the target of edge enhancement.
pub const DEPTH: usize = 1;

/// Local (conv-norm-relu-conv-norm) and global (pool-linear-relu-linear) attention.
#[derive(Clone, Debug)]
pub struct DualBranch {
    local_a: Cbr,
    local_b: Conv3x3,
    local_norm: Norm,
    global_a: Linear,
    global_b: Linear,
}

impl DualBranch {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            local_a: Cbr::new(store, &format!("{name}.local_a"), c, c)?,
            local_b: Conv3x3::new(store, &format!("{name}.local_b"), c, c)?,
            local_norm: Norm::new(store, &format!("{name}.local_norm"), c)?,
            global_a: Linear::new(store, &format!("{name}.global_a"), c, c)?,
            global_b: Linear::new(store, &format!("{name}.global_b"), c, c)?,
        })
    }

    /// Local map plus the spatially broadcast global vector.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let l = self.local_a.forward(tape, store, x)?;
        let l = self.local_b.forward(tape, store, l)?;
        let l = self.local_norm.forward(tape, store, l)?;
        let g = tape.avg_pool_global(x)?;
        let g = self.global_a.forward(tape, store, g)?;
        let g = tape.relu(g)?;
        let g = self.global_b.forward(tape, store, g)?;
        tape.add(l, g)
    }
}

/// `lo + upsample(cbr(hi))`; also returns the upsampled deep term.
pub fn adjacent_integrate(tape: &mut Tape, store: &ParamStore, cbr: &Cbr, lo: Var, hi: Var) -> Result<(Var, Var)> {
    let (ls, hs) = (tape.shape(lo).to_vec(), tape.shape(hi).to_vec());
    if ls.len() != 3 || hs.len() != 3 || ls[2] != hs[2] {
        return Err(contract_err!("adjacent scales disagree on channels: {ls:?} vs {hs:?}"));
    }
    if hs[0] > ls[0] || hs[1] > ls[1] {
        return Err(contract_err!("deeper scale {hs:?} is larger than shallower {ls:?}"));
    }
    let h = cbr.forward(tape, store, hi)?;
    let up = tape.bilinear_upsample(h, ls[0], ls[1])?;
    Ok((tape.add(lo, up)?, up))
}

/// Convex gate `hi_up ⊙ σ(dba) + lo ⊙ (1 − σ(dba))`.
pub fn selective_aggregate(tape: &mut Tape, hi_up: Var, lo: Var, dba: Var) -> Result<Var> {
    if tape.shape(hi_up) != tape.shape(lo) || tape.shape(dba) != tape.shape(lo) {
        return Err(contract_err!(
            "selective aggregation shapes differ: {:?}, {:?}, {:?}",
            tape.shape(hi_up),
            tape.shape(lo),
            tape.shape(dba)
        ));
    }
    let g = tape.sigmoid(dba)?;
    gate_mix(tape, hi_up, lo, g)
}

/// `hi ⊙ g + lo ⊙ (1 − g)` for an explicit gate.
pub fn gate_mix(tape: &mut Tape, hi: Var, lo: Var, g: Var) -> Result<Var> {
    let diff = tape.sub(hi, lo)?;
    let gd = tape.mul(diff, g)?;
    tape.add(lo, gd)
}

/// Adjacent-scale attention block.
#[derive(Clone, Debug)]
pub struct Asa {
    cbr: Cbr,
    dual: DualBranch,
}

impl Asa {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self { cbr: Cbr::new(store, &format!("{name}.cbr"), c, c)?, dual: DualBranch::new(store, &format!("{name}.dual"), c)? })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, lo: Var, hi: Var) -> Result<Var> {
        let (f, hi_up) = adjacent_integrate(tape, store, &self.cbr, lo, hi)?;
        let dba = self.dual.forward(tape, store, f)?;
        selective_aggregate(tape, hi_up, lo, dba)
    }
}

/// Sobel gradient magnitude of a single-channel `[H,W]`/`[H,W,1]` image with
/// replicated borders, divided by its maximum (all zeros for flat images).
pub fn edge_map(reference: &Tensor) -> Result<Tensor> {
    let s = reference.shape();
    if !(s.len() == 2 || (s.len() == 3 && s[2] == 1)) {
        return Err(dim_err!("edge reference must be single-channel, got {s:?}"));
    }
    let (h, w) = (s[0], s[1]);
    let d = reference.data();
    let at = |y: isize, x: isize| d[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|v| *v /= max);
    }
    Tensor::new(vec![h, w, 1], mag)
}

/// `feature ⊙ (1 + edges)`, with `edges: [H,W,1]` treated as a constant.
pub fn edge_enhance(tape: &mut Tape, feature: Var, edges: &Tensor) -> Result<Var> {
    let e = tape.constant(edges.clone());
    let e1 = tape.add_scalar(e, 1.0)?;
    tape.mul(feature, e1)
}

/// Channel mean of an `[H,W,C]` image followed by `levels` 2x2 average poolings.
pub fn pooled_gray(image: &Tensor, levels: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let mut g = tape.mean_axes(x, &[2])?;
    for _ in 0..levels {
        g = tape.avg_pool2(g)?;
    }
    Ok(tape.value(g).clone())
}

#[derive(Clone, Debug)]
struct SubDecoder {
    /// `asa[stream][k]` joins ladder level `k` with the decoded level `k + 1`.
    asa: [Vec<Asa>; 2],
    merge: Vec<Linear>,
}

impl SubDecoder {
    fn new(store: &mut ParamStore, name: &str, c: usize, stages: usize) -> Result<Self> {
        let mk = |store: &mut ParamStore, s: &str| -> Result<Vec<Asa>> {
            (0..stages - 1).map(|k| Asa::new(store, &format!("{name}.{s}.asa{}", k + 1), c)).collect()
        };
        let asa = [mk(store, "shared")?, mk(store, "specific")?];
        let merge = (0..stages).map(|k| Linear::new(store, &format!("{name}.merge{}", k + 1), 2 * c, c)).collect::<Result<_>>()?;
        Ok(Self { asa, merge })
    }

    /// Decodes both streams from the deepest level up and merges them per
    /// level; returns merged features shallowest first.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, ladder: &[Vec<Var>; 2]) -> Result<Vec<Var>> {
        let n = ladder[0].len();
        let mut decoded: [Vec<Var>; 2] = [vec![ladder[0][n - 1]; n], vec![ladder[1][n - 1]; n]];
        for s in 0..2 {
            for k in (0..n - 1).rev() {
                decoded[s][k] = self.asa[s][k].forward(tape, store, ladder[s][k], decoded[s][k + 1])?;
            }
        }
        (0..n).map(|k| concat_project(tape, store, &self.merge[k], &[decoded[0][k], decoded[1][k]])).collect()
    }
}

#[derive(Clone, Debug)]
pub struct VdtModel {
    size: usize,
    modality_ids: Vec<usize>,
    backbones: Vec<Backbone>,
    fusion: Vec<FusionStage>,
    shared_proj: Vec<Linear>,
    first: SubDecoder,
    second: Option<(SubDecoder, Linear)>,
    preliminary: Linear,
    stage_heads: Vec<Linear>,
    final_head: Linear,
}

#[derive(Clone, Debug)]
pub struct VdtForward {
    /// Five `[H,W,1]` maps in (0,1); the last one is the final prediction.
    pub maps: Vec<Var>,
    pub fusion: Vec<FusionOutputs>,
}

impl VdtForward {
    pub fn final_map(&self) -> Var {
        *self.maps.last().expect("five maps")
    }
}

impl VdtModel {
    pub const STAGES: usize = 3;

    pub fn new(store: &mut ParamStore, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.modalities.len();
        let c = cfg.channels;
        let size = cfg.size();
        let fc = cfg.fusion_config();
        let backbones = (0..m)
            .map(|n| Backbone::new(store, &format!("vdt.backbone{n}"), INPUT_CHANNELS, c, Self::STAGES))
            .collect::<Result<Vec<_>>>()?;
        let mut fusion = Vec::new();
        let mut shared_proj = Vec::new();
        for s in 1..=Self::STAGES {
            let e = stage_extent(size, s);
            let stage = FusionStage::new(store, &format!("vdt.stage{s}.fusion"), &fc, m, e, e, c, c)?;
            shared_proj.push(Linear::new(store, &format!("vdt.stage{s}.shared"), stage.shared_width(), c)?);
            fusion.push(stage);
        }
        let first = SubDecoder::new(store, "vdt.dec1", c, Self::STAGES)?;
        let second = if cfg.decoder_stack == 2 {
            Some((SubDecoder::new(store, "vdt.dec2", c, Self::STAGES)?, Linear::new(store, "vdt.dec2.guide", c, c)?))
        } else {
            None
        };
        let preliminary = Linear::new(store, "vdt.map.preliminary", c, 1)?;
        let stage_heads =
            (1..=Self::STAGES).map(|s| Linear::new(store, &format!("vdt.map.stage{s}"), c, 1)).collect::<Result<_>>()?;
        let final_in = if second.is_some() { 2 * c } else { c };
        let final_head = Linear::new(store, "vdt.map.final", final_in, 1)?;
        Ok(Self {
            size,
            modality_ids: cfg.modalities.clone(),
            backbones,
            fusion,
            shared_proj,
            first,
            second,
            preliminary,
            stage_heads,
            final_head,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn modalities(&self) -> usize {
        self.backbones.len()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Tensor]) -> Result<VdtForward> {
        let m = self.modalities();
        if inputs.len() != m {
            return Err(dim_err!("model expects {m} modalities, got {}", inputs.len()));
        }
        let mut per_modality = Vec::with_capacity(m);
        for (bb, x) in self.backbones.iter().zip(inputs) {
            if x.shape() != [self.size, self.size, INPUT_CHANNELS] {
                return Err(dim_err!(
                    "modality image must be [{0}, {0}, {INPUT_CHANNELS}], got {1:?}",
                    self.size,
                    x.shape()
                ));
            }
            let xv = tape.constant(x.clone());
            per_modality.push(bb.forward(tape, store, xv)?);
        }
        let visible = self.modality_ids.iter().position(|&id| id == VISIBLE);
        let depth = self.modality_ids.iter().position(|&id| id == DEPTH);
        if let (Some(v), Some(d)) = (visible, depth) {
            for s in 0..Self::STAGES {
                let edges = edge_map(&pooled_gray(&inputs[v], s + 1)?)?;
                per_modality[d][s] = edge_enhance(tape, per_modality[d][s], &edges)?;
            }
        }

        let mut fusion = Vec::with_capacity(Self::STAGES);
        let mut ladder: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        for s in 0..Self::STAGES {
            let feats: Vec<Var> = per_modality.iter().map(|f| f[s]).collect();
            let out = self.fusion[s].fuse(tape, store, &feats)?;
            ladder[0].push(shared_to_features(tape, store, &self.shared_proj[s], out.shared)?);
            ladder[1].push(out.merged_specific);
            fusion.push(out);
        }
        let maps = self.decode(tape, store, &ladder)?;
        Ok(VdtForward { maps, fusion })
    }

    fn decode(&self, tape: &mut Tape, store: &ParamStore, ladder: &[Vec<Var>; 2]) -> Result<Vec<Var>> {
        if ladder[0].len() < 2 {
            return Err(config_err!("the decoder needs at least two ladder stages"));
        }
        let m1 = self.first.forward(tape, store, ladder)?;
        let mut maps = vec![self.side_map(tape, store, &self.preliminary, m1[0])?];
        let (stage_feats, final_in) = match &self.second {
            Some((dec, guide)) => {
                let g = guide.forward(tape, store, m1[0])?;
                let mut guided: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
                let mut g_level = g;
                for k in 0..ladder[0].len() {
                    if k > 0 {
                        g_level = tape.avg_pool2(g_level)?;
                    }
                    for s in 0..2 {
                        guided[s].push(tape.add(ladder[s][k], g_level)?);
                    }
                }
                let m2 = dec.forward(tape, store, &guided)?;
                let joined = tape.concat(&[m1[0], m2[0]], 2)?;
                (m2, joined)
            }
            None => (m1.clone(), m1[0]),
        };
        for k in (0..stage_feats.len()).rev() {
            maps.push(self.side_map(tape, store, &self.stage_heads[k], stage_feats[k])?);
        }
        maps.push(self.side_map(tape, store, &self.final_head, final_in)?);
        Ok(maps)
    }

    fn side_map(&self, tape: &mut Tape, store: &ParamStore, head: &Linear, x: Var) -> Result<Var> {
        let p = head.forward(tape, store, x)?;
        let p = tape.sigmoid(p)?;
        tape.bilinear_upsample(p, self.size, self.size)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Probability clamp inside the cross-entropy term.
pub const BCE_CLAMP: f64 = 1e-12;

/// Normalised 11x11 Gaussian window, row-major.
pub fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

/// Loss components for one map.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub bce: Var,
    pub ssim: Var,
    pub iou: Var,
}

fn check_gt(gt: &Tensor) -> Result<()> {
    if gt.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(contract_err!("saliency ground truth must lie in [0, 1]"));
    }
    Ok(())
}

/// Mean clamped binary cross-entropy, `1 − mean SSIM`, and `1 − soft IoU` of one map.
pub fn map_loss_terms(tape: &mut Tape, p: Var, gt: &Tensor) -> Result<LossTerms> {
    check_gt(gt)?;
    if tape.shape(p) != gt.shape() {
        return Err(dim_err!("map {:?} vs ground truth {:?}", tape.shape(p), gt.shape()));
    }
    let g = tape.constant(gt.clone());

    let pc = tape.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let lp = tape.ln(pc)?;
    let one_minus = tape.neg(pc)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let lq = tape.ln(one_minus)?;
    let ng = tape.constant(Tensor::from_fn(gt.shape().to_vec(), |i| 1.0 - gt.get(i))?);
    let a = tape.mul(g, lp)?;
    let b = tape.mul(ng, lq)?;
    let ll = tape.add(a, b)?;
    let ll = tape.mean_all(ll)?;
    let bce = tape.neg(ll)?;

    let win = ssim_window();
    let mu_p = tape.blur(p, &win)?;
    let mu_g = tape.blur(g, &win)?;
    let pp = tape.square(p)?;
    let gg = tape.square(g)?;
    let pg = tape.mul(p, g)?;
    let e_pp = tape.blur(pp, &win)?;
    let e_gg = tape.blur(gg, &win)?;
    let e_pg = tape.blur(pg, &win)?;
    let mu_pp = tape.square(mu_p)?;
    let mu_gg = tape.square(mu_g)?;
    let mu_pg = tape.mul(mu_p, mu_g)?;
    let var_p = tape.sub(e_pp, mu_pp)?;
    let var_g = tape.sub(e_gg, mu_gg)?;
    let cov = tape.sub(e_pg, mu_pg)?;
    let n1 = tape.scale(mu_pg, 2.0)?;
    let n1 = tape.add_scalar(n1, SSIM_C1)?;
    let n2 = tape.scale(cov, 2.0)?;
    let n2 = tape.add_scalar(n2, SSIM_C2)?;
    let d1 = tape.add(mu_pp, mu_gg)?;
    let d1 = tape.add_scalar(d1, SSIM_C1)?;
    let d2 = tape.add(var_p, var_g)?;
    let d2 = tape.add_scalar(d2, SSIM_C2)?;
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let ssim_map = tape.div(num, den)?;
    let ssim_mean = tape.mean_all(ssim_map)?;
    let ssim = tape.neg(ssim_mean)?;
    let ssim = tape.add_scalar(ssim, 1.0)?;

    let inter = tape.sum_all(pg)?;
    let total = tape.add(p, g)?;
    let union = tape.sub(total, pg)?;
    let union = tape.sum_all(union)?;
    let ratio = tape.div(inter, union)?;
    let iou = tape.neg(ratio)?;
    let iou = tape.add_scalar(iou, 1.0)?;
    Ok(LossTerms { bce, ssim, iou })
}

/// Sum of the three loss terms over all maps.
pub fn saliency_loss(tape: &mut Tape, maps: &[Var], gt: &Tensor) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in maps {
        let t = map_loss_terms(tape, p, gt)?;
        let s = tape.add(t.bce, t.ssim)?;
        let s = tape.add(s, t.iou)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| contract_err!("no saliency maps to supervise"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;

    #[test]
    fn five_maps_in_unit_interval() {
        let mut cfg = PipelineConfig::new(Task::Vdt, 2);
        cfg.channels = 4;
        cfg.part_types = 2;
        cfg.size = Some(16);
        for stack in [1, 2] {
            cfg.decoder_stack = stack;
            let mut store = ParamStore::new(cfg.seed);
            let model = VdtModel::new(&mut store, &cfg).unwrap();
            let inputs: Vec<Tensor> = (0..3)
                .map(|n| Tensor::from_fn([16, 16, 3], |i| ((i[0] * 3 + i[1] + n + i[2]) % 7) as f64 / 7.0).unwrap())
                .collect();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &store, &inputs).unwrap();
            assert_eq!(out.maps.len(), 5);
            for &m in &out.maps {
                assert_eq!(tape.shape(m), &[16, 16, 1]);
                assert!(tape.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn window_is_normalised() {
        let w = ssim_window();
        assert_eq!(w.len(), 121);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(w[60] > w[0]);
    }

    #[test]
    fn edge_map_examples() {
        let flat = Tensor::full([5, 5, 1], 0.3);
        assert!(edge_map(&flat).unwrap().data().iter().all(|&v| v == 0.0));
        let step = Tensor::from_fn([4, 6, 1], |i| if i[1] >= 3 { 1.0 } else { 0.0 }).unwrap();
        let e = edge_map(&step).unwrap();
        for y in 0..4 {
            assert_eq!(e.get(&[y, 2, 0]), 1.0);
            assert_eq!(e.get(&[y, 3, 0]), 1.0);
            assert_eq!(e.get(&[y, 0, 0]), 0.0);
            assert_eq!(e.get(&[y, 5, 0]), 0.0);
        }
    }

    #[test]
    fn gate_limits() {
        let mut tape = Tape::new();
        let hi = tape.constant(Tensor::from_fn([2, 2, 1], |i| (i[0] + i[1]) as f64).unwrap());
        let lo = tape.constant(Tensor::from_fn([2, 2, 1], |i| (i[0] * 3) as f64 - 1.0).unwrap());
        let zero = tape.constant(Tensor::zeros([2, 2, 1]));
        let out = selective_aggregate(&mut tape, hi, lo, zero).unwrap();
        for k in 0..4 {
            let expect = 0.5 * (tape.value(hi).data()[k] + tape.value(lo).data()[k]);
            assert!((tape.value(out).data()[k] - expect).abs() < 1e-15);
        }
        let one = tape.constant(Tensor::ones([2, 2, 1]));
        let out = gate_mix(&mut tape, hi, lo, one).unwrap();
        assert_eq!(tape.value(out), tape.value(hi));
    }

    #[test]
    fn loss_rejects_out_of_range_gt() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full([4, 4, 1], 0.5));
        let gt = Tensor::full([4, 4, 1], 2.0);
        assert!(matches!(saliency_loss(&mut tape, &[p], &gt), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn half_probability_bce_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full([4, 4, 1], 0.5));
        let gt = Tensor::from_fn([4, 4, 1], |i| (i[1] % 2) as f64).unwrap();
        let t = map_loss_terms(&mut tape, p, &gt).unwrap();
        assert!((tape.value(t.bce).data()[0] - 2f64.ln()).abs() < 1e-12);
    }
}
