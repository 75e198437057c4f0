//! Routing-coefficient export for one pixel of one fusion stage.

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::config::PipelineConfig;
use crate::error::{contract_err, Result};
use crate::fusion::{coefficient_block, Axis};
use crate::fusion::RoutingOutcome;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// One routing coefficient, flattened for tabular export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainEntry {
    pub stage: usize,
    pub axis: Axis,
    /// Row (horizontal axis) or column (vertical axis) at stage resolution.
    pub position: usize,
    pub part_type: usize,
    /// Index into the configured modality list.
    pub modality: usize,
    pub whole_type: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisExplanation {
    pub axis: Axis,
    pub position: usize,
    /// `[M·T_p][T_w]` coefficients of this position; every row sums to one.
    pub raw: Vec<Vec<f64>>,
    /// Per modality, its `[T_p][T_w]` block of `raw`.
    pub blocks: Vec<Vec<Vec<f64>>>,
    /// Per modality, the `T_p` split coefficients that weight its parts.
    pub splits: Vec<Vec<f64>>,
    pub entries: Vec<ExplainEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// Dataset index of the explained scene, when it came from a dataset.
    pub scene: Option<usize>,
    pub stage: usize,
    pub row: usize,
    pub col: usize,
    pub part_types: usize,
    pub whole_types: usize,
    /// Generator ids of the fused modalities, in fusion order.
    pub modalities: Vec<usize>,
    pub horizontal: AxisExplanation,
    pub vertical: AxisExplanation,
}

impl Explanation {
    /// Whitespace-separated table with one block per axis, for gnuplot's `index`.
    pub fn gnuplot_table(&self) -> String {
        let mut s = String::new();
        for (k, ax) in [&self.horizontal, &self.vertical].into_iter().enumerate() {
            if k > 0 {
                s.push_str("\n\n");
            }
            s.push_str(&format!("# axis={} position={}\n# modality part_type whole_type value\n", ax.axis.name(), ax.position));
            for e in &ax.entries {
                s.push_str(&format!("{} {} {} {}\n", e.modality, e.part_type, e.whole_type, e.value));
            }
        }
        s
    }
}

/// Backbone stages (1-based) at which `model` fuses modalities.
pub fn fusion_stage_numbers(model: &Model) -> Vec<usize> {
    match model {
        Model::Smm(_) => vec![2],
        Model::Vdt(_) => (1..=crate::vdt::VdtModel::STAGES).collect(),
    }
}

/// Routing coefficients for pixel `(row, col)` of fusion at backbone `stage`.
#[allow(clippy::too_many_arguments)]
pub fn explain(
    model: &Model,
    store: &ParamStore,
    cfg: &PipelineConfig,
    inputs: &[Tensor],
    scene: Option<usize>,
    stage: usize,
    row: usize,
    col: usize,
) -> Result<Explanation> {
    let stages = fusion_stage_numbers(model);
    let slot = stages
        .iter()
        .position(|&s| s == stage)
        .ok_or_else(|| contract_err!("stage {stage} has no fusion; valid stages are {stages:?}"))?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, inputs)?;
    let trace = out.fusion[slot]
        .routing
        .as_ref()
        .ok_or_else(|| contract_err!("fusion mechanism `{}` has no routing coefficients", cfg.fusion.name()))?;
    let t_p = cfg.part_types;
    let m = cfg.modalities.len();
    let horizontal = axis_explanation(&mut tape, &trace.horizontal, &trace.splits_h, Axis::Horizontal, stage, row, m, t_p)?;
    let vertical = axis_explanation(&mut tape, &trace.vertical, &trace.splits_v, Axis::Vertical, stage, col, m, t_p)?;
    Ok(Explanation {
        scene,
        stage,
        row,
        col,
        part_types: t_p,
        whole_types: cfg.whole_types(),
        modalities: cfg.modalities.clone(),
        horizontal,
        vertical,
    })
}

#[allow(clippy::too_many_arguments)]
fn axis_explanation(
    tape: &mut Tape,
    outcome: &RoutingOutcome,
    splits: &[Var],
    axis: Axis,
    stage: usize,
    position: usize,
    m: usize,
    t_p: usize,
) -> Result<AxisExplanation> {
    let coeffs = outcome.coefficients;
    let shape = tape.shape(coeffs).to_vec();
    let (l, i, j) = (shape[0], shape[1], shape[2]);
    if position >= l {
        return Err(contract_err!("{} position {position} out of range for extent {l}", axis.name()));
    }
    let rows = |t: &Tensor, width: usize, count: usize| -> Vec<Vec<f64>> {
        let base = position * count * width;
        (0..count).map(|r| t.data()[base + r * width..base + (r + 1) * width].to_vec()).collect()
    };
    let raw = rows(tape.value(coeffs), j, i);
    let mut blocks = Vec::with_capacity(m);
    for n in 0..m {
        let b = coefficient_block(tape, coeffs, n, t_p)?;
        blocks.push(rows(tape.value(b), j, t_p));
    }
    let splits = splits
        .iter()
        .map(|&s| {
            let t = tape.value(s);
            t.data()[position * t_p..(position + 1) * t_p].to_vec()
        })
        .collect();
    let mut entries = Vec::with_capacity(i * j);
    for (r, row) in raw.iter().enumerate() {
        for (w, &value) in row.iter().enumerate() {
            entries.push(ExplainEntry { stage, axis, position, part_type: r % t_p, modality: r / t_p, whole_type: w, value });
        }
    }
    Ok(AxisExplanation { axis, position, raw, blocks, splits, entries })
}
