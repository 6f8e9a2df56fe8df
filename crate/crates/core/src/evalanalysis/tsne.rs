//! Exact t-SNE.
//!
//! Gaussian input affinities are calibrated per point by bisection on the
//! precision until the conditional distribution reaches the target
//! perplexity, then symmetrized. The 2-D embedding minimizes
//! `KL(P ‖ Q)` under a Student-t kernel with momentum gradient descent,
//! per-coordinate adaptive gains, and early exaggeration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ParamPointSet;

pub const AFFINITY_FLOOR: f64 = 1e-12;
const PERPLEXITY_TOL: f64 = 1e-5;
const MAX_BISECTION: usize = 50;
const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const MOMENTUM_SWITCH: usize = 250;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iters: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity >= 2.0) {
            return Err(Error::Config(format!("perplexity must be at least 2, got {}", self.perplexity)));
        }
        if self.iters == 0 {
            return Err(Error::Config("t-SNE needs at least one iteration".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("t-SNE learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    /// `N × 2` coordinates.
    pub embedding: Vec<[f64; 2]>,
    /// Perplexity actually reached by each point's calibrated kernel.
    pub perplexities: Vec<f64>,
    pub target_perplexity: f64,
    /// KL divergence of the initial embedding.
    pub kl_initial: f64,
    /// KL divergence right after early exaggeration ends.
    pub kl_post_exaggeration: f64,
    pub kl_final: f64,
}

fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional row `p_{j|i}` for precision `beta`, and its entropy (nats).
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> (f64, f64) {
    let mut total = 0.0;
    for (j, (o, &d)) in out.iter_mut().zip(dist).enumerate() {
        *o = if j == i { 0.0 } else { (-beta * d).exp() };
        total += *o;
    }
    if total <= 0.0 || !total.is_finite() {
        return (total, f64::NAN);
    }
    let mut entropy = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o /= total;
        if j != i && *o > 0.0 {
            entropy -= *o * o.ln();
        }
    }
    (total, entropy)
}

/// Calibrated conditional affinities and the perplexity each row reached.
fn calibrate(dist: &[f64], n: usize, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut reached = vec![0.0; n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        if row.iter().enumerate().all(|(j, &d)| j == i || d == 0.0) {
            return Err(Error::Degenerate(format!(
                "point {i} coincides with every other point; its affinity row carries no information"
            )));
        }
        // scale-free start: beta ~ 1 / mean distance
        let mean = row.iter().sum::<f64>() / (n - 1) as f64;
        let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let out = &mut p[i * n..(i + 1) * n];
        let mut entropy = f64::NAN;
        for _ in 0..MAX_BISECTION {
            let (total, h) = conditional_row(row, i, beta, out);
            if total <= 0.0 {
                // every affinity underflowed: kernel too narrow
                hi = beta;
                beta = (lo + hi) / 2.0;
                continue;
            }
            entropy = h;
            let diff = h - target;
            if diff.abs() < PERPLEXITY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (lo + hi) / 2.0;
            }
        }
        if !entropy.is_finite() {
            return Err(Error::Degenerate(format!("point {i} has an all-zero affinity row")));
        }
        let (_, h) = conditional_row(row, i, beta, out);
        reached[i] = h.exp();
    }
    Ok((p, reached))
}

fn kl_divergence(p: &[f64], q_num: &[f64], q_total: f64) -> f64 {
    p.iter()
        .zip(q_num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &num)| pij * (pij / (num / q_total).max(AFFINITY_FLOOR)).ln())
        .sum()
}

/// Student-t numerators `1/(1+|y_i−y_j|²)` (zero diagonal) and their sum.
fn student_t(y: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    total
}

pub fn tsne(set: &ParamPointSet, cfg: &TsneConfig) -> Result<TsneResult> {
    cfg.validate()?;
    let n = set.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let dim = set.dim();
    if set.points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidShape("points differ in dimension".into()));
    }
    if set.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate in t-SNE input".into()));
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0);

    let dist = squared_distances(&set.points);
    let (cond, reached) = calibrate(&dist, n, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(AFFINITY_FLOOR);
            }
        }
    }

    let init = Tensor::randn(&[n, 2], cfg.seed, 1e-4)?;
    let mut y: Vec<[f64; 2]> = init.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];

    let total = student_t(&y, &mut num);
    let kl_initial = kl_divergence(&p, &num, total);
    let mut kl_post = f64::NAN;

    for iter in 0..cfg.iters {
        let exaggeration = if iter < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if iter < MOMENTUM_SWITCH {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        if iter == EXAGGERATION_ITERS {
            let total = student_t(&y, &mut num);
            kl_post = kl_divergence(&p, &num, total);
        }
        let total = student_t(&y, &mut num);
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - w / total) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                // grow gains where the gradient flips against the velocity
                gains[i][d] = if (grad[d] > 0.0) != (velocity[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(MIN_GAIN)
                };
                velocity[i][d] = momentum * velocity[i][d] - cfg.learning_rate * gains[i][d] * grad[d];
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let cx = y.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|v| v[1]).sum::<f64>() / n as f64;
        for yi in &mut y {
            yi[0] -= cx;
            yi[1] -= cy;
        }
    }

    let total = student_t(&y, &mut num);
    let kl_final = kl_divergence(&p, &num, total);
    if kl_post.is_nan() {
        kl_post = kl_final;
    }
    Ok(TsneResult {
        embedding: y,
        perplexities: reached,
        target_perplexity: perplexity,
        kl_initial,
        kl_post_exaggeration: kl_post,
        kl_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: Vec<Vec<f64>>) -> ParamPointSet {
        let labels = vec!["x".to_string(); points.len()];
        ParamPointSet { points, labels, layer: 0 }
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let t = Tensor::randn(&[n, d], seed, 1.0).unwrap();
        t.data().chunks(d).map(|c| c.to_vec()).collect()
    }

    #[test]
    fn output_shape_and_calibration() {
        let s = set(random_points(40, 5, 1));
        let cfg = TsneConfig {
            perplexity: 10.0,
            iters: 300,
            ..Default::default()
        };
        let r = tsne(&s, &cfg).unwrap();
        assert_eq!(r.embedding.len(), 40);
        for &perp in &r.perplexities {
            assert!((perp - 10.0).abs() < 1e-3, "{perp}");
        }
        assert!(r.kl_final < r.kl_post_exaggeration);
    }

    #[test]
    fn perplexity_capped_for_small_sets() {
        let s = set(random_points(10, 3, 2));
        let r = tsne(&s, &TsneConfig { iters: 10, ..Default::default() }).unwrap();
        assert_eq!(r.target_perplexity, 3.0);
    }

    #[test]
    fn duplicate_pair_is_tolerated() {
        let mut pts = random_points(12, 4, 3);
        pts[5] = pts[2].clone();
        let r = tsne(&set(pts), &TsneConfig { iters: 50, ..Default::default() }).unwrap();
        assert!(r.embedding.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn all_identical_points_are_degenerate() {
        let pts = vec![vec![1.0, 2.0]; 6];
        match tsne(&set(pts), &TsneConfig::default()) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("point 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_points() {
        assert!(tsne(&set(random_points(3, 2, 1)), &TsneConfig::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let s = set(random_points(20, 3, 9));
        let cfg = TsneConfig {
            iters: 100,
            perplexity: 5.0,
            seed: 4,
            ..Default::default()
        };
        assert_eq!(tsne(&s, &cfg).unwrap(), tsne(&s, &cfg).unwrap());
    }
}
