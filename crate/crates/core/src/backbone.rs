//! Small convolutional feature extractor: each stage is conv3x3, instance
//! norm, ReLU, then 2x2 average pooling, halving the resolution (rounded up).

use crate::error::Result;
use crate::nn::Cbr;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Cbr>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, channels: usize, stages: usize) -> Result<Self> {
        let stages = (0..stages)
            .map(|s| Cbr::new(store, &format!("{name}.stage{}", s + 1), if s == 0 { cin } else { channels }, channels))
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    /// Features after every stage, shallowest first.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for stage in &self.stages {
            let y = stage.forward(tape, store, cur)?;
            cur = tape.avg_pool2(y)?;
            out.push(cur);
        }
        Ok(out)
    }
}

/// Spatial extent after `stages` halvings.
pub fn stage_extent(size: usize, stages: usize) -> usize {
    (0..stages).fold(size, |s, _| s.div_ceil(2))
}
