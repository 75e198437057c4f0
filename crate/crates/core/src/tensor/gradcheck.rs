use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many entries per parameter (chosen by `seed`);
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_entries_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked entries.
    pub max_rel_error: f64,
    pub checked_entries: usize,
    pub worst_param: Option<String>,
    pub worst_index: Option<usize>,
}

/// Compares tape gradients of the scalar returned by `f` against central
/// finite differences on the parameters of `store`. The store is restored
/// bit-exactly before returning.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape, store)?;
        tape.value(v).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked_entries: 0, worst_param: None, worst_index: None };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.tensor(id).numel();
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match options.max_entries_per_param {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        for k in entries {
            let orig = store.values_mut(id)[k];
            store.values_mut(id)[k] = orig + options.eps;
            let plus = eval(store);
            store.values_mut(id)[k] = orig - options.eps;
            let minus = eval(store);
            store.values_mut(id)[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * options.eps);
            let rel = (analytic[k] - numeric).abs() / numeric.abs().max(1.0);
            report.checked_entries += 1;
            if rel > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_param = Some(store.get(id).name.clone());
                report.worst_index = Some(k);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tensor};

    fn check(build: impl Fn(&mut Tape, &ParamStore) -> Result<Var>, shapes: &[(&str, &[usize])]) -> f64 {
        let mut store = ParamStore::new(11);
        for (name, shape) in shapes {
            store.add(*name, shape, Init::Normal(0.7)).unwrap();
        }
        let before: Vec<Tensor> = store.iter().map(|(_, p)| p.tensor.clone()).collect();
        let r = grad_check(&mut store, build, &GradCheckOptions::default()).unwrap();
        let after: Vec<Tensor> = store.iter().map(|(_, p)| p.tensor.clone()).collect();
        assert_eq!(before, after);
        r.max_rel_error
    }

    fn p(tape: &mut Tape, store: &ParamStore, name: &str) -> Var {
        tape.param(store, store.id(name).unwrap())
    }

    #[test]
    fn elementwise_and_broadcast_ops() {
        let err = check(
            |t, s| {
                let a = p(t, s, "a");
                let b = p(t, s, "b");
                let sg = t.sigmoid(a)?;
                let ls = t.log_sigmoid(b)?;
                let prod = t.mul(sg, ls)?;
                let ex = t.exp(b)?;
                let q = t.div(prod, ex)?;
                let sq = t.square(a)?;
                let sq1 = t.add_scalar(sq, 1.0)?;
                let lnq = t.ln(sq1)?;
                let r = t.sqrt(sq1)?;
                let d = t.sub(lnq, r)?;
                let m = t.add(q, d)?;
                let sc = t.scale(m, -0.3)?;
                t.sum_all(sc)
            },
            &[("a", &[2, 3]), ("b", &[1, 3])],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reductions_layout_and_softmax() {
        let err = check(
            |t, s| {
                let a = p(t, s, "a");
                let sm = t.softmax(a, 1)?;
                let mx = t.max_axes(a, &[2])?;
                let sl = t.slice(sm, 1, 1, 2)?;
                let cat = t.concat(&[sl, sm], 1)?;
                let su = t.sum_axes(cat, &[0])?;
                let r = t.reshape(su, &[5, 4])?;
                let w = t.constant(Tensor::from_fn([5, 4], |i| (i[0] * 4 + i[1]) as f64 * 0.1)?);
                let rw = t.mul(r, w)?;
                let l1 = t.sum_all(rw)?;
                let l2 = t.sum_all(mx)?;
                t.add(l1, l2)
            },
            &[("a", &[2, 3, 4])],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_ops() {
        let err = check(
            |t, s| {
                let x = p(t, s, "x");
                let cw = p(t, s, "cw");
                let cb = p(t, s, "cb");
                let g = p(t, s, "g");
                let be = p(t, s, "be");
                let lw = p(t, s, "lw");
                let lb = p(t, s, "lb");
                let c = t.conv2d_3x3(x, cw, cb)?;
                let n = t.norm_affine(c, g, be)?;
                let r = t.sigmoid(n)?;
                let pool = t.avg_pool2(r)?;
                let up = t.bilinear_upsample(pool, 5, 4)?;
                let bl = t.blur(up, &[0.1, 0.2, 0.1, 0.2, 0.4, 0.2, 0.1, 0.2, 0.1])?;
                let l = t.linear_along_last(bl, lw, lb)?;
                let sq = t.square(l)?;
                t.mean_all(sq)
            },
            &[
                ("x", &[5, 3, 2]),
                ("cw", &[3, 3, 2, 3]),
                ("cb", &[3]),
                ("g", &[3]),
                ("be", &[3]),
                ("lw", &[3, 2]),
                ("lb", &[2]),
            ],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn votes_and_ohem() {
        let err = check(
            |t, s| {
                let pose = p(t, s, "pose");
                let w = p(t, s, "w");
                let v = t.capsule_votes(pose, w)?;
                let logits = t.reshape(v, &[2 * 2 * 3 * 4, 4])?;
                let labels: Vec<usize> = (0..48).map(|i| i % 4).collect();
                t.ohem_cross_entropy(logits, &labels, 0.5, 4)
            },
            &[("pose", &[2, 2, 16]), ("w", &[2, 3, 16])],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sampling_limits_checked_entries() {
        let mut store = ParamStore::new(1);
        store.add("w", &[50], Init::Normal(1.0)).unwrap();
        let opts = GradCheckOptions { max_entries_per_param: Some(7), ..Default::default() };
        let r = grad_check(
            &mut store,
            |t, s| {
                let w = t.param(s, s.id("w").unwrap());
                let sq = t.square(w)?;
                t.sum_all(sq)
            },
            &opts,
        )
        .unwrap();
        assert_eq!(r.checked_entries, 7);
        assert!(r.max_rel_error < 1e-8);
    }
}
