//! Non-capsule fusion rules with the same output contract as capsule fusion,
//! used to compare fusion mechanisms at matched downstream architecture.

use super::{CapsuleField, FusionConfig, FusionMechanism, CAPSULE_DIM};
use crate::error::Result;
use crate::nn::Linear;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub(super) struct BaselineStage {
    mechanism: FusionMechanism,
    whole_types: usize,
    shared: Linear,
    specific: Vec<Linear>,
    share_params: bool,
    /// Query, key and value projections for attention fusion.
    qkv: Option<[Linear; 3]>,
}

impl BaselineStage {
    pub(super) fn new(
        store: &mut ParamStore,
        name: &str,
        mechanism: FusionMechanism,
        cfg: &FusionConfig,
        modalities: usize,
        branches: usize,
        channels: usize,
    ) -> Result<Self> {
        let shared_in = match mechanism {
            FusionMechanism::Concatenation => modalities * channels,
            _ => channels,
        };
        let shared = Linear::new(store, &format!("{name}.{}.shared", mechanism.name()), shared_in, cfg.whole_types * CAPSULE_DIM)?;
        let specific = (0..branches)
            .map(|b| Linear::new(store, &format!("{name}.{}.specific{b}", mechanism.name()), channels, cfg.part_types * CAPSULE_DIM))
            .collect::<Result<Vec<_>>>()?;
        let qkv = if mechanism == FusionMechanism::Attention {
            let mk = |store: &mut ParamStore, p: &str| Linear::new(store, &format!("{name}.attention.{p}"), channels, channels);
            Some([mk(store, "q")?, mk(store, "k")?, mk(store, "v")?])
        } else {
            None
        };
        Ok(Self { mechanism, whole_types: cfg.whole_types, shared, specific, share_params: cfg.share_params, qkv })
    }

    /// Returns the shared capsule-shaped field and per-modality specifics.
    pub(super) fn forward(&self, tape: &mut Tape, store: &ParamStore, features: &[Var]) -> Result<(CapsuleField, Vec<Var>)> {
        let s = tape.shape(features[0]).to_vec();
        let (h, w, c) = (s[0], s[1], s[2]);
        let m = features.len();
        let (pooled, per_modality) = match self.mechanism {
            FusionMechanism::Addition => {
                let mut acc = features[0];
                for &f in &features[1..] {
                    acc = tape.add(acc, f)?;
                }
                (acc, features.to_vec())
            }
            FusionMechanism::Concatenation => (tape.concat(features, 2)?, features.to_vec()),
            FusionMechanism::Attention => {
                let [q, k, v] = self.qkv.as_ref().expect("attention projections exist");
                let tokens: Vec<Var> =
                    features.iter().map(|&f| tape.reshape(f, &[h, w, 1, c])).collect::<Result<_>>()?;
                let x = tape.concat(&tokens, 2)?;
                let qx = q.forward(tape, store, x)?;
                let kx = k.forward(tape, store, x)?;
                let vx = v.forward(tape, store, x)?;
                let qx = tape.reshape(qx, &[h, w, m, 1, c])?;
                let kx = tape.reshape(kx, &[h, w, 1, m, c])?;
                let dots = tape.mul(qx, kx)?;
                let dots = tape.sum_axes(dots, &[4])?;
                let dots = tape.scale(dots, 1.0 / (c as f64).sqrt())?;
                let attn = tape.softmax(dots, 3)?;
                let vx = tape.reshape(vx, &[h, w, 1, m, c])?;
                let mixed = tape.mul(attn, vx)?;
                let mixed = tape.sum_axes(mixed, &[3])?;
                let mixed = tape.reshape(mixed, &[h, w, m, c])?;
                let out = tape.add(mixed, x)?;
                let per = (0..m)
                    .map(|n| {
                        let t = tape.slice(out, 2, n, 1)?;
                        tape.reshape(t, &[h, w, c])
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mean = tape.mean_axes(out, &[2])?;
                (tape.reshape(mean, &[h, w, c])?, per)
            }
            FusionMechanism::Pwrf => unreachable!("capsule fusion is not a baseline"),
        };
        let shared = self.shared.forward(tape, store, pooled)?;
        let grid = tape.reshape(shared, &[h, w, self.whole_types, CAPSULE_DIM])?;
        let specifics = per_modality
            .iter()
            .enumerate()
            .map(|(n, &f)| self.specific[if self.share_params { 0 } else { n }].forward(tape, store, f))
            .collect::<Result<Vec<_>>>()?;
        Ok((CapsuleField { grid }, specifics))
    }
}
