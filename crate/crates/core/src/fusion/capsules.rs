//! Capsule construction, axis disentangling, routing and recombination.

use serde::{Deserialize, Serialize};

use super::routing::{route_votes, RoutedVotes};
use crate::error::{contract_err, dim_err, Result};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Tape, Var};

/// Values per capsule: a 4x4 pose matrix followed by one activation.
pub const CAPSULE_DIM: usize = 17;
pub const POSE_DIM: usize = 16;

/// `[H, W, T, 17]` grid of capsules.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleField {
    pub grid: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Keeps rows: `[H, 1, T, 17]`.
    Horizontal,
    /// Keeps columns: `[1, W, T, 17]`.
    Vertical,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::Horizontal, Axis::Vertical];

    /// The resolution axis that is collapsed to extent 1.
    pub fn collapsed(self) -> usize {
        match self {
            Axis::Horizontal => 1,
            Axis::Vertical => 0,
        }
    }

    pub fn kept(self) -> usize {
        1 - self.collapsed()
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Horizontal => "horizontal",
            Axis::Vertical => "vertical",
        }
    }
}

/// Capsules along a single resolution axis.
#[derive(Clone, Copy, Debug)]
pub struct AxisCapsules {
    pub grid: Var,
    pub axis: Axis,
}

impl AxisCapsules {
    /// Number of positions along the kept axis.
    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.grid)[self.axis.kept()]
    }

    pub fn types(&self, tape: &Tape) -> usize {
        tape.shape(self.grid)[2]
    }

    fn check(&self, tape: &Tape) -> Result<()> {
        let s = tape.shape(self.grid);
        if s.len() != 4 || s[3] != CAPSULE_DIM || s[self.axis.collapsed()] != 1 {
            return Err(dim_err!("{} axis capsules have shape {s:?}", self.axis.name()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RoutingOutcome {
    pub wholes: AxisCapsules,
    /// `[L, I, J]`: responsibility of part type `i` for whole type `j` at position `l`.
    pub coefficients: Var,
    pub iterations: usize,
}

/// Projections from features to primary capsules.
#[derive(Clone, Copy, Debug)]
pub struct PrimaryCaps {
    pub pose: Linear,
    pub act: Linear,
    pub types: usize,
}

impl PrimaryCaps {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, types: usize) -> Result<Self> {
        if types == 0 {
            return Err(contract_err!("capsule type count must be positive"));
        }
        Ok(Self {
            pose: Linear::new(store, &format!("{name}.pose"), c, types * POSE_DIM)?,
            act: Linear::new(store, &format!("{name}.act"), c, types)?,
            types,
        })
    }
}

/// `f: [H,W,C]` to a `[H,W,T,17]` capsule field with sigmoid activations.
pub fn make_primary_capsules(tape: &mut Tape, store: &ParamStore, caps: &PrimaryCaps, f: Var) -> Result<CapsuleField> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("primary capsules expect [H,W,C], got {s:?}"));
    }
    let (h, w, t) = (s[0], s[1], caps.types);
    let pose = caps.pose.forward(tape, store, f)?;
    let pose = tape.reshape(pose, &[h, w, t, POSE_DIM])?;
    let act = caps.act.forward(tape, store, f)?;
    let act = tape.sigmoid(act)?;
    let act = tape.reshape(act, &[h, w, t, 1])?;
    Ok(CapsuleField { grid: tape.concat(&[pose, act], 3)? })
}

/// Collapses one resolution axis with a learnable convex combination whose
/// weights are `softmax(logits)`; `logits` has one entry per collapsed position.
pub fn disentangle(tape: &mut Tape, cf: CapsuleField, axis: Axis, logits: Var) -> Result<AxisCapsules> {
    let s = tape.shape(cf.grid).to_vec();
    if s.len() != 4 || s[3] != CAPSULE_DIM {
        return Err(dim_err!("capsule field must be [H,W,T,17], got {s:?}"));
    }
    let ax = axis.collapsed();
    if tape.shape(logits) != [s[ax]] {
        return Err(dim_err!("{} reduction weights {:?} for field {s:?}", axis.name(), tape.shape(logits)));
    }
    let weights = tape.softmax(logits, 0)?;
    let mut wshape = vec![1; 4];
    wshape[ax] = s[ax];
    let weights = tape.reshape(weights, &wshape)?;
    let weighted = tape.mul(cf.grid, weights)?;
    Ok(AxisCapsules { grid: tape.sum_axes(weighted, &[ax])?, axis })
}

/// Concatenates per-modality part capsules along the type axis, in order.
pub fn concat_parts(tape: &mut Tape, parts: &[AxisCapsules]) -> Result<AxisCapsules> {
    let first = parts.first().ok_or_else(|| contract_err!("no part capsules to concatenate"))?;
    for p in parts {
        p.check(tape)?;
        if p.axis != first.axis {
            return Err(contract_err!("cannot concatenate {} and {} capsules", first.axis.name(), p.axis.name()));
        }
        if p.len(tape) != first.len(tape) {
            return Err(contract_err!("part capsules disagree on resolution extent"));
        }
    }
    let grids: Vec<Var> = parts.iter().map(|p| p.grid).collect();
    Ok(AxisCapsules { grid: tape.concat(&grids, 2)?, axis: first.axis })
}

/// Learnable routing state for one axis.
#[derive(Clone, Copy, Debug)]
pub struct RoutingWeights {
    /// `[I, J, 16]` vote transforms.
    pub transforms: Var,
    pub beta_u: Var,
    pub beta_a: Var,
}

/// Routes `parts` (`I` types) to `J` whole types at every position along the axis.
pub fn em_routing(
    tape: &mut Tape,
    parts: AxisCapsules,
    weights: RoutingWeights,
    iters: usize,
    lambdas: &[f64],
) -> Result<RoutingOutcome> {
    parts.check(tape)?;
    let (l, i) = (parts.len(tape), parts.types(tape));
    let ts = tape.shape(weights.transforms).to_vec();
    if ts.len() != 3 || ts[0] != i || ts[2] != POSE_DIM {
        return Err(dim_err!("vote transforms {ts:?} for {i} part types"));
    }
    let j = ts[1];
    let flat = tape.reshape(parts.grid, &[l, i, CAPSULE_DIM])?;
    let pose = tape.slice(flat, 2, 0, POSE_DIM)?;
    let act = tape.slice(flat, 2, POSE_DIM, 1)?;
    let act = tape.reshape(act, &[l, i])?;
    let votes = tape.capsule_votes(pose, weights.transforms)?;
    let RoutedVotes { mean, activation, coefficients } =
        route_votes(tape, votes, act, weights.beta_u, weights.beta_a, iters, lambdas)?;
    let whole = tape.concat(&[mean, activation], 2)?;
    let shape = match parts.axis {
        Axis::Horizontal => [l, 1, j, CAPSULE_DIM],
        Axis::Vertical => [1, l, j, CAPSULE_DIM],
    };
    let grid = tape.reshape(whole, &shape)?;
    Ok(RoutingOutcome { wholes: AxisCapsules { grid, axis: parts.axis }, coefficients, iterations: iters })
}

/// Outer product of horizontal and vertical capsules over resolution.
pub fn entangle(tape: &mut Tape, h: AxisCapsules, v: AxisCapsules) -> Result<CapsuleField> {
    if h.axis != Axis::Horizontal || v.axis != Axis::Vertical {
        return Err(contract_err!("entangle expects horizontal then vertical capsules"));
    }
    let (hs, vs) = (tape.shape(h.grid), tape.shape(v.grid));
    if hs.len() != 4 || vs.len() != 4 || hs[2..] != vs[2..] {
        return Err(contract_err!("entangle: capsule types differ ({hs:?} vs {vs:?})"));
    }
    Ok(CapsuleField { grid: tape.matmul_resolution(h.grid, v.grid)? })
}

/// Block of part types `[t_p·n, t_p·(n+1))` of `coefficients: [L, I, J]`, before averaging.
/// `modality` is zero-based.
pub fn coefficient_block(tape: &mut Tape, coefficients: Var, modality: usize, t_p: usize) -> Result<Var> {
    let s = tape.shape(coefficients).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("coefficients must be [L,I,J], got {s:?}"));
    }
    if t_p == 0 || s[1] % t_p != 0 || modality >= s[1] / t_p {
        return Err(contract_err!("modality {modality} out of range for {} part types of {t_p} each", s[1]));
    }
    tape.slice(coefficients, 1, modality * t_p, t_p)
}

/// Per-modality split: the modality's coefficient block averaged over whole
/// types, shaped `[H,1,T_p,1]` or `[1,W,T_p,1]` to broadcast over capsules.
pub fn split_coefficients(tape: &mut Tape, coefficients: Var, axis: Axis, modality: usize, t_p: usize) -> Result<Var> {
    let block = coefficient_block(tape, coefficients, modality, t_p)?;
    let l = tape.shape(block)[0];
    let mean = tape.mean_axes(block, &[2])?;
    let shape = match axis {
        Axis::Horizontal => [l, 1, t_p, 1],
        Axis::Vertical => [1, l, t_p, 1],
    };
    tape.reshape(mean, &shape)
}

/// Modal-specific details `(P_H ⊙ R_H) ⊗ (P_V ⊙ R_V)` flattened to `[H, W, T_p·17]`.
pub fn modal_specific(
    tape: &mut Tape,
    part_h: AxisCapsules,
    part_v: AxisCapsules,
    split_h: Var,
    split_v: Var,
) -> Result<Var> {
    let h = tape.mul(part_h.grid, split_h)?;
    let v = tape.mul(part_v.grid, split_v)?;
    let sp = entangle(tape, AxisCapsules { grid: h, axis: Axis::Horizontal }, AxisCapsules { grid: v, axis: Axis::Vertical })?;
    let s = tape.shape(sp.grid).to_vec();
    tape.reshape(sp.grid, &[s[0], s[1], s[2] * s[3]])
}

/// Concatenates per-modality specifics along channels and projects to `proj.cout`.
pub fn merge_specifics(tape: &mut Tape, store: &ParamStore, proj: &Linear, specifics: &[Var]) -> Result<Var> {
    if specifics.is_empty() {
        return Err(contract_err!("no modal-specific tensors to merge"));
    }
    crate::nn::concat_project(tape, store, proj, specifics)
}
