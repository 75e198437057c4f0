//! Small parameterised building blocks shared by the fusion module and both heads.

use crate::error::Result;
use crate::tensor::{Init, ParamId, ParamStore, Tape, Var};

/// Per-position projection along the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), &[cin, cout], Init::FanIn(cin))?;
        let b = store.add(format!("{name}.b"), &[cout], Init::Zeros)?;
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear_along_last(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), &[3, 3, cin, cout], Init::FanIn(9 * cin))?;
        let b = store.add(format!("{name}.b"), &[cout], Init::Zeros)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d_3x3(x, w, b)
    }
}

/// Instance normalisation with a learnable per-channel affine map.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), &[c], Init::Const(1.0))?;
        let beta = store.add(format!("{name}.beta"), &[c], Init::Zeros)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.norm_affine(x, g, b)
    }
}

/// Convolution, normalisation and ReLU.
#[derive(Clone, Copy, Debug)]
pub struct Cbr {
    pub conv: Conv3x3,
    pub norm: Norm,
}

impl Cbr {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv3x3::new(store, &format!("{name}.conv"), cin, cout)?,
            norm: Norm::new(store, &format!("{name}.norm"), cout)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = self.conv.forward(tape, store, x)?;
        let n = self.norm.forward(tape, store, c)?;
        tape.relu(n)
    }
}

/// Concatenate along channels, then project: the generic "concat and convolve" merge.
pub fn concat_project(tape: &mut Tape, store: &ParamStore, proj: &Linear, xs: &[Var]) -> Result<Var> {
    let rank = tape.shape(xs[0]).len();
    let cat = tape.concat(xs, rank - 1)?;
    proj.forward(tape, store, cat)
}
