//! Reference implementations written as plain scalar loops over 2-D grids.
//! They share conventions with the library (threshold grid, positive rule,
//! normalisations) but none of its code.

#![allow(dead_code)]

use pwrf_core::fusion::{em_routing, Axis, AxisCapsules, RoutingWeights};
use pwrf_core::metrics::{self, EvalPair, ThresholdMode};
use pwrf_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = f64::EPSILON;

pub type Grid = Vec<Vec<f64>>;

pub fn to_grid(h: usize, w: usize, flat: &[f64]) -> Grid {
    (0..h).map(|r| flat[r * w..(r + 1) * w].to_vec()).collect()
}

fn dims(g: &Grid) -> (usize, usize) {
    (g.len(), g[0].len())
}

fn count(g: &Grid) -> f64 {
    let (h, w) = dims(g);
    (h * w) as f64
}

fn mean_of(g: &Grid) -> f64 {
    let mut s = 0.0;
    for row in g {
        for &v in row {
            s += v;
        }
    }
    s / count(g)
}

pub fn mae(pred: &Grid, gt: &Grid) -> f64 {
    let (h, w) = dims(pred);
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            s += (pred[r][c] - gt[r][c]).abs();
        }
    }
    s / (h * w) as f64
}

fn threshold_map(pred: &Grid, t: f64) -> Grid {
    pred.iter()
        .map(|row| row.iter().map(|&p| if p > 0.0 && p >= t { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn adaptive(pred: &Grid) -> f64 {
    let t = 2.0 * mean_of(pred);
    if t > 1.0 {
        1.0
    } else {
        t
    }
}

fn f_binary(bin: &Grid, gt: &Grid, beta2: f64) -> f64 {
    let (h, w) = dims(gt);
    let (mut tp, mut pp, mut gp) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if bin[r][c] == 1.0 {
                pp += 1.0;
                if gt[r][c] == 1.0 {
                    tp += 1.0;
                }
            }
            if gt[r][c] == 1.0 {
                gp += 1.0;
            }
        }
    }
    if gp == 0.0 {
        return 0.0;
    }
    let precision = if pp == 0.0 { 0.0 } else { tp / pp };
    let recall = tp / gp;
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

pub fn f_adaptive(pred: &Grid, gt: &Grid, beta2: f64) -> f64 {
    f_binary(&threshold_map(pred, adaptive(pred)), gt, beta2)
}

pub fn f_mean(pred: &Grid, gt: &Grid, beta2: f64) -> f64 {
    let mut s = 0.0;
    for k in 1..=256 {
        s += f_binary(&threshold_map(pred, k as f64 / 256.0), gt, beta2);
    }
    s / 256.0
}

fn e_binary(fm: &Grid, gt: &Grid) -> f64 {
    let (h, w) = dims(gt);
    let gt_sum: f64 = gt.iter().flatten().sum();
    let n = (h * w) as f64;
    let mut total = 0.0;
    if gt_sum == 0.0 {
        for r in 0..h {
            for c in 0..w {
                total += 1.0 - fm[r][c];
            }
        }
    } else if gt_sum == n {
        for r in 0..h {
            for c in 0..w {
                total += fm[r][c];
            }
        }
    } else {
        let mf = mean_of(fm);
        let mg = mean_of(gt);
        for r in 0..h {
            for c in 0..w {
                let a = fm[r][c] - mf;
                let b = gt[r][c] - mg;
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                total += (align + 1.0) * (align + 1.0) / 4.0;
            }
        }
    }
    total / n
}

pub fn e_adaptive(pred: &Grid, gt: &Grid) -> f64 {
    e_binary(&threshold_map(pred, adaptive(pred)), gt)
}

pub fn e_mean(pred: &Grid, gt: &Grid) -> f64 {
    let mut s = 0.0;
    for k in 1..=256 {
        s += e_binary(&threshold_map(pred, k as f64 / 256.0), gt);
    }
    s / 256.0
}

/// Object score of the values selected by `mask`: sample mean and deviation.
fn object(vals: &Grid, mask: &Grid) -> f64 {
    let mut xs = Vec::new();
    for (vr, mr) in vals.iter().zip(mask) {
        for (&v, &m) in vr.iter().zip(mr) {
            if m == 1.0 {
                xs.push(v);
            }
        }
    }
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let x = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 { (xs.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    2.0 * x / (x * x + 1.0 + sd + EPS)
}

fn s_object(pred: &Grid, gt: &Grid) -> f64 {
    let fg_vals: Grid = pred.clone();
    let bg_vals: Grid = pred.iter().map(|row| row.iter().map(|p| 1.0 - p).collect()).collect();
    let bg_mask: Grid = gt.iter().map(|row| row.iter().map(|g| 1.0 - g).collect()).collect();
    let u = mean_of(gt);
    u * object(&fg_vals, gt) + (1.0 - u) * object(&bg_vals, &bg_mask)
}

fn ssim(p: &Grid, g: &Grid) -> f64 {
    let n = count(p);
    let x = mean_of(p);
    let y = mean_of(g);
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (pr, gr) in p.iter().zip(g) {
        for (&a, &b) in pr.iter().zip(gr) {
            sx += (a - x) * (a - x);
            sy += (b - y) * (b - y);
            sxy += (a - x) * (b - y);
        }
    }
    let d = n - 1.0 + EPS;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn block(g: &Grid, r0: usize, r1: usize, c0: usize, c1: usize) -> Grid {
    g[r0..r1].iter().map(|row| row[c0..c1].to_vec()).collect()
}

fn s_region(pred: &Grid, gt: &Grid) -> f64 {
    let (h, w) = dims(gt);
    // 1-based centroid of the foreground, image centre when there is none
    let (mut total, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            total += gt[r][c];
            sx += gt[r][c] * (c + 1) as f64;
            sy += gt[r][c] * (r + 1) as f64;
        }
    }
    let (x, y) = if total == 0.0 {
        ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize)
    } else {
        ((sx / total).round() as usize, (sy / total).round() as usize)
    };
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let mut q = 0.0;
    for (r0, r1, c0, c1) in [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)] {
        if r1 == r0 || c1 == c0 {
            continue;
        }
        let weight = ((r1 - r0) * (c1 - c0)) as f64 / area;
        q += weight * ssim(&block(pred, r0, r1, c0, c1), &block(gt, r0, r1, c0, c1));
    }
    q
}

pub fn s_measure(pred: &Grid, gt: &Grid, alpha: f64) -> f64 {
    let y = mean_of(gt);
    let q = if y == 0.0 {
        1.0 - mean_of(pred)
    } else if y == 1.0 {
        mean_of(pred)
    } else {
        alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt)
    };
    if q < 0.0 {
        0.0
    } else {
        q
    }
}

/// Mean IoU from a confusion matrix, over classes seen in either map.
pub fn miou(pred: &[usize], gt: &[usize], classes: usize) -> f64 {
    let mut conf = vec![vec![0.0; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        conf[g][p] += 1.0;
    }
    let mut sum = 0.0;
    let mut seen = 0.0;
    for k in 0..classes {
        let inter = conf[k][k];
        let row: f64 = conf[k].iter().sum();
        let col: f64 = (0..classes).map(|g| conf[g][k]).sum();
        let union = row + col - inter;
        if union > 0.0 {
            sum += inter / union;
            seen += 1.0;
        }
    }
    if seen == 0.0 {
        0.0
    } else {
        sum / seen
    }
}

/// Result of one expectation-maximisation routing iteration.
pub struct EmStep {
    /// `[j][d]`
    pub mean: Vec<[f64; 16]>,
    pub activation: Vec<f64>,
    /// `[i][j]`
    pub responsibility: Vec<Vec<f64>>,
}

fn mat4(a: &[f64], b: &[f64]) -> [f64; 16] {
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a[r * 4 + k] * b[k * 4 + c];
            }
            out[r * 4 + c] = s;
        }
    }
    out
}

/// One routing iteration at a single position, starting from uniform
/// responsibilities. `poses[i]` and `transforms[i][j]` are row-major 4x4.
pub fn em_step(
    poses: &[[f64; 16]],
    acts: &[f64],
    transforms: &[Vec<[f64; 16]>],
    beta_u: &[f64],
    beta_a: &[f64],
    lambda: f64,
) -> EmStep {
    let ni = poses.len();
    let nj = beta_u.len();
    let votes: Vec<Vec<[f64; 16]>> =
        (0..ni).map(|i| (0..nj).map(|j| mat4(&poses[i], &transforms[i][j])).collect()).collect();

    let mut mean = vec![[0.0; 16]; nj];
    let mut var = vec![[0.0; 16]; nj];
    let mut activation = vec![0.0; nj];
    for j in 0..nj {
        let weights: Vec<f64> = (0..ni).map(|i| acts[i] / nj as f64).collect();
        let mass: f64 = weights.iter().sum();
        for d in 0..16 {
            let mut num = 0.0;
            for i in 0..ni {
                num += weights[i] * votes[i][j][d];
            }
            mean[j][d] = num / (mass + 1e-8);
            let mut spread = 0.0;
            for i in 0..ni {
                let e = votes[i][j][d] - mean[j][d];
                spread += weights[i] * e * e;
            }
            var[j][d] = spread / (mass + 1e-8) + 1e-8;
        }
        let mut cost = 0.0;
        for d in 0..16 {
            cost += (beta_u[j] + 0.5 * var[j][d].ln()) * mass;
        }
        activation[j] = 1.0 / (1.0 + (-lambda * (beta_a[j] - cost)).exp());
    }

    let mut responsibility = vec![vec![0.0; nj]; ni];
    for i in 0..ni {
        let mut logp = vec![0.0; nj];
        for j in 0..nj {
            let mut ll = 0.0;
            for d in 0..16 {
                let e = votes[i][j][d] - mean[j][d];
                ll += -e * e / (2.0 * var[j][d]) - 0.5 * (2.0 * std::f64::consts::PI * var[j][d]).ln();
            }
            logp[j] = activation[j].ln() + ll;
        }
        let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logp.iter().map(|v| (v - top).exp()).sum();
        for j in 0..nj {
            responsibility[i][j] = (logp[j] - top).exp() / z;
        }
    }
    EmStep { mean, activation, responsibility }
}

/// A random 8x8 pair. Predictions mix continuous values with exact zeros,
/// ones and grid-aligned values so that ties with thresholds occur.
pub fn random_pair(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = (0..64)
        .map(|_| match rng.gen_range(0..5) {
            0 => 0.0,
            1 => 1.0,
            2 => rng.gen_range(0..=256) as f64 / 256.0,
            _ => rng.gen::<f64>(),
        })
        .collect();
    let gt = match seed % 10 {
        0 => vec![0.0; 64],
        1 => vec![1.0; 64],
        _ => {
            let (r0, c0) = (rng.gen_range(0..6), rng.gen_range(0..6));
            let (h, w) = (rng.gen_range(1..=8 - r0), rng.gen_range(1..=8 - c0));
            (0..64).map(|k| ((r0..r0 + h).contains(&(k / 8)) && (c0..c0 + w).contains(&(k % 8))) as u8 as f64).collect()
        }
    };
    (pred, gt)
}

pub fn compare(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Vec<(&'static str, f64, f64)> {
    let pair = EvalPair::new(h, w, pred.to_vec(), gt).unwrap();
    let (p, g): (Grid, Grid) = (to_grid(h, w, pred), to_grid(h, w, gt));
    vec![
        ("mae", metrics::mae(&pair), mae(&p, &g)),
        ("f_adaptive", metrics::f_measure(&pair, 0.3, ThresholdMode::Adaptive).unwrap().value, f_adaptive(&p, &g, 0.3)),
        ("f_mean", metrics::f_measure(&pair, 0.3, ThresholdMode::Mean).unwrap().value, f_mean(&p, &g, 0.3)),
        ("e_adaptive", metrics::e_measure(&pair, ThresholdMode::Adaptive), e_adaptive(&p, &g)),
        ("e_mean", metrics::e_measure(&pair, ThresholdMode::Mean), e_mean(&p, &g)),
        ("s_measure", metrics::s_measure(&pair, 0.5).unwrap(), s_measure(&p, &g, 0.5)),
    ]
}

pub struct Instance {
    pub poses: Vec<[f64; 16]>,
    pub acts: Vec<f64>,
    pub transforms: Vec<Vec<[f64; 16]>>,
    pub beta_u: Vec<f64>,
    pub beta_a: Vec<f64>,
}

pub fn hand_set() -> Instance {
    let pose = |s: f64| std::array::from_fn(|k| if k % 5 == 0 { 1.0 + s } else { 0.1 * s * (k as f64 - 7.5) / 8.0 });
    let tr = |a: f64, b: f64| std::array::from_fn(|k| if k % 5 == 0 { a } else { b * ((k * 7) % 5) as f64 / 5.0 });
    Instance {
        poses: vec![pose(0.2), pose(-0.3)],
        acts: vec![0.8, 0.35],
        transforms: vec![vec![tr(1.0, 0.1), tr(0.5, -0.2)], vec![tr(0.9, 0.3), tr(-0.7, 0.05)]],
        beta_u: vec![0.1, -0.2],
        beta_a: vec![0.3, 0.05],
    }
}

/// Runs the library's routing on one position and returns (mean, activation, coefficients).
pub fn route_one(inst: &Instance, lambda: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ni, nj) = (inst.poses.len(), inst.beta_u.len());
    let mut tape = Tape::new();
    let grid = Tensor::from_fn([1, 1, ni, 17], |i| if i[3] < 16 { inst.poses[i[2]][i[3]] } else { inst.acts[i[2]] }).unwrap();
    let transforms = Tensor::from_fn([ni, nj, 16], |i| inst.transforms[i[0]][i[1]][i[2]]).unwrap();
    let parts = AxisCapsules { grid: tape.constant(grid), axis: Axis::Horizontal };
    let weights = RoutingWeights {
        transforms: tape.constant(transforms),
        beta_u: tape.constant(Tensor::new([nj], inst.beta_u.clone()).unwrap()),
        beta_a: tape.constant(Tensor::new([nj], inst.beta_a.clone()).unwrap()),
    };
    let out = em_routing(&mut tape, parts, weights, 1, &[lambda]).unwrap();
    let wholes = tape.value(out.wholes.grid).data().to_vec();
    let mean = wholes.chunks(17).flat_map(|c| c[..16].to_vec()).collect();
    let act = wholes.chunks(17).map(|c| c[16]).collect();
    (mean, act, tape.value(out.coefficients).data().to_vec())
}

/// Largest absolute difference between the library and the oracle.
pub fn em_mismatch(inst: &Instance, lambda: f64) -> f64 {
    let (mean, act, coeff) = route_one(inst, lambda);
    let o = em_step(&inst.poses, &inst.acts, &inst.transforms, &inst.beta_u, &inst.beta_a, lambda);
    let o_mean: Vec<f64> = o.mean.iter().flatten().copied().collect();
    let o_coeff: Vec<f64> = o.responsibility.iter().flatten().copied().collect();
    let mut worst = 0.0f64;
    for (a, b) in [(&mean, &o_mean), (&act, &o.activation), (&coeff, &o_coeff)] {
        for (x, y) in a.iter().zip(b.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}
