//! Expectation-maximisation routing between matrix capsules, unrolled on the tape.
//!
//! Every resolution position `l` is routed independently. With part votes
//! `V[l,i,j]` (16 values each), part activations `a[l,i]`, and
//! responsibilities `R[l,i,j]` initialised to `1/J`, one iteration is:
//!
//! * M-step: `r = R·a`, `mu_j = Σ_i r V / Σ_i r`, `var_j = Σ_i r (V-mu)² / Σ_i r`
//!   (floored), `cost_j = Σ_h (beta_u + ln(var_j,h)/2) · Σ_i r`, and
//!   `a_j = sigmoid(lambda · (beta_a - cost_j))`.
//! * E-step: `R[l,i,:] = softmax_j(ln a_j + ln N(V[l,i,j]; mu_j, var_j))`.

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Tape, Var};

/// Floor added to every per-dimension variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Guards the weighted means when a whole receives no responsibility at all.
pub const MASS_EPS: f64 = 1e-8;

/// Raw tensors produced by [`route_votes`].
#[derive(Clone, Copy, Debug)]
pub struct RoutedVotes {
    /// `[L, J, 16]` whole poses.
    pub mean: Var,
    /// `[L, J, 1]` whole activations.
    pub activation: Var,
    /// `[L, I, J]` final E-step responsibilities.
    pub coefficients: Var,
}

pub(crate) fn check_schedule(iters: usize, lambdas: &[f64]) -> Result<()> {
    if iters == 0 {
        return Err(contract_err!("routing needs at least one iteration"));
    }
    if lambdas.len() < iters {
        return Err(contract_err!("lambda schedule has {} entries for {iters} iterations", lambdas.len()));
    }
    Ok(())
}

/// Routes `votes: [L,I,J,16]` with part activations `act: [L,I]` to `J` wholes.
/// `beta_u` and `beta_a` have shape `[J]`.
pub fn route_votes(
    tape: &mut Tape,
    votes: Var,
    act: Var,
    beta_u: Var,
    beta_a: Var,
    iters: usize,
    lambdas: &[f64],
) -> Result<RoutedVotes> {
    check_schedule(iters, lambdas)?;
    let vs = tape.shape(votes).to_vec();
    if vs.len() != 4 || vs[3] != 16 {
        return Err(dim_err!("votes must be [L,I,J,16], got {vs:?}"));
    }
    let (l, i, j) = (vs[0], vs[1], vs[2]);
    if tape.shape(act) != [l, i] || tape.shape(beta_u) != [j] || tape.shape(beta_a) != [j] {
        return Err(dim_err!(
            "routing inputs: activations {:?}, beta_u {:?}, beta_a {:?} for votes {vs:?}",
            tape.shape(act),
            tape.shape(beta_u),
            tape.shape(beta_a)
        ));
    }
    let a_in = tape.reshape(act, &[l, i, 1, 1])?;
    let beta_u = tape.reshape(beta_u, &[1, 1, j, 1])?;
    let beta_a = tape.reshape(beta_a, &[1, 1, j, 1])?;
    let log_norm = 8.0 * (2.0 * std::f64::consts::PI).ln();

    let mut r = tape.constant(crate::tensor::Tensor::full([l, i, j, 1], 1.0 / j as f64));
    let mut out = None;
    for &lambda in &lambdas[..iters] {
        // M-step
        let rw = tape.mul(r, a_in)?;
        let mass = tape.sum_axes(rw, &[1])?;
        let denom = tape.add_scalar(mass, MASS_EPS)?;
        let rv = tape.mul(rw, votes)?;
        let rv_sum = tape.sum_axes(rv, &[1])?;
        let mean = tape.div(rv_sum, denom)?;
        let diff = tape.sub(votes, mean)?;
        let diff_sq = tape.square(diff)?;
        let rd = tape.mul(rw, diff_sq)?;
        let rd_sum = tape.sum_axes(rd, &[1])?;
        let var = tape.div(rd_sum, denom)?;
        let var = tape.add_scalar(var, VARIANCE_FLOOR)?;
        let ln_var = tape.ln(var)?;
        let half_ln_var = tape.scale(ln_var, 0.5)?;
        let per_dim = tape.add(half_ln_var, beta_u)?;
        let cost = tape.mul(per_dim, mass)?;
        let cost = tape.sum_axes(cost, &[3])?;
        let gap = tape.sub(beta_a, cost)?;
        let logit = tape.scale(gap, lambda)?;
        let activation = tape.sigmoid(logit)?;

        // E-step
        let two_var = tape.scale(var, 2.0)?;
        let quad = tape.div(diff_sq, two_var)?;
        let terms = tape.add(quad, half_ln_var)?;
        let neg_ll = tape.sum_axes(terms, &[3])?;
        let log_act = tape.log_sigmoid(logit)?;
        let score = tape.sub(log_act, neg_ll)?;
        let score = tape.add_scalar(score, -log_norm)?;
        r = tape.softmax(score, 2)?;
        out = Some((mean, activation));
    }
    let (mean, activation) = out.expect("at least one iteration ran");
    Ok(RoutedVotes {
        mean: tape.reshape(mean, &[l, j, 16])?,
        activation: tape.reshape(activation, &[l, j, 1])?,
        coefficients: tape.reshape(r, &[l, i, j])?,
    })
}
