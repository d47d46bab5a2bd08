//! Exact O(n²) t-SNE with per-point perplexity calibration, early
//! exaggeration, a two-stage momentum schedule and adaptive gains.

use crate::error::{ensure, Error, Result};
use crate::seed::rng_from_seed;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 4.0,
            exaggeration_iterations: 100,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    /// KL(P||Q) at the random initialization.
    pub kl_initial: f64,
    pub kl_final: f64,
}

const ENTROPY_TOL: f64 = 1e-4;

fn squared_distances(data: &[Vec<f64>]) -> Vec<f64> {
    let n = data.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = data[i].iter().zip(&data[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional row `p_{j|i}` for precision `beta`, plus its Shannon entropy (nats).
fn conditional_row(dist: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let n = row.len();
    let min = (0..n).filter(|&j| j != i).map(|j| dist[j]).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        row[j] = if j == i { 0.0 } else { (-beta * (dist[j] - min)).exp() };
        sum += row[j];
    }
    let mut h = 0.0;
    for v in row.iter_mut() {
        *v /= sum;
        if *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    h
}

/// Symmetrized joint probabilities `P = (P_{j|i} + P_{i|j}) / 2n`, row-major.
pub fn joint_probabilities(data: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = data.len();
    ensure!(perplexity > 0.0, "perplexity must be positive");
    ensure!(
        n as f64 > 3.0 * perplexity,
        "t-SNE with perplexity {perplexity} needs more than {} points, got {n}",
        3.0 * perplexity
    );
    ensure!(
        data.iter().all(|r| r.len() == data[0].len() && r.iter().all(|v| v.is_finite())),
        "embeddings must be finite and of equal dimension"
    );
    let dist = squared_distances(data);
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        let row = &mut cond[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..200 {
            let h = conditional_row(d, i, beta, row);
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

/// Student-t kernel numerators and their sum.
fn q_numerators(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, sum) = q_numerators(y);
    p.iter()
        .zip(&num)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qn)| pv * (pv / (qn / sum).max(1e-300)).ln())
        .sum()
}

pub fn tsne(data: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let p = joint_probabilities(data, cfg.perplexity)?;
    let n = data.len();
    let mut rng = rng_from_seed(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [1e-4 * a, 1e-4 * b]
        })
        .collect();
    let kl_initial = kl_divergence(&p, &y);
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0; 2]; n];

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if iter < cfg.momentum_switch { cfg.initial_momentum } else { cfg.final_momentum };
        let (num, sum) = q_numerators(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - w / sum) * w;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            grad[i] = g;
        }
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = if same_sign { (gains[i][d] * 0.8).max(0.01) } else { gains[i][d] + 0.2 };
                velocity[i][d] = momentum * velocity[i][d] - cfg.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += velocity[i][d];
            }
        }
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), v| (a + v[0], b + v[1]));
        for v in y.iter_mut() {
            v[0] -= mx / n as f64;
            v[1] -= my / n as f64;
        }
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::Numerical("t-SNE diverged".into()));
    }
    let kl_final = kl_divergence(&p, &y);
    Ok(TsneResult { points: y, kl_initial, kl_final })
}

impl TsneResult {
    /// CSV with columns `x,y,label`; `labels` must align with `points`.
    pub fn to_csv(&self, labels: &[usize]) -> Result<String> {
        ensure!(labels.len() == self.points.len(), "{} labels for {} points", labels.len(), self.points.len());
        let mut out = String::from("x,y,label\n");
        for (p, l) in self.points.iter().zip(labels) {
            out.push_str(&format!("{:.6},{:.6},{l}\n", p[0], p[1]));
        }
        Ok(out)
    }
}
