//! Deep-ensemble predictions and the aleatoric/epistemic split of the
//! predictive covariance.
//!
//! For softmax outputs `c_1..c_T` with mean `c̄`:
//!
//! ```text
//! aleatoric = 1/T Σ_t diag(c_t) - c_t c_tᵀ
//! epistemic = 1/T Σ_t (c_t - c̄)(c_t - c̄)ᵀ
//! ```
//!
//! Each ensemble member contributes exactly one deterministic forward pass.

use crate::error::{ensure, Error, Result};
use crate::nn::{softmax_normalize, EmbeddingNetwork};
use crate::spectro::SpectrogramImage;
use serde::{Deserialize, Serialize};

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<EmbeddingNetwork<f32>>,
    trained: bool,
}

impl Ensemble {
    /// Members must share one architecture with a classifier head.
    pub fn new(members: Vec<EmbeddingNetwork<f32>>) -> Result<Self> {
        ensure!(!members.is_empty(), "ensemble needs at least one member");
        let arch = &members[0].arch;
        ensure!(arch.num_classes.is_some(), "ensemble members need a classifier head");
        ensure!(
            members.iter().all(|m| &m.arch == arch),
            "ensemble members must share one architecture"
        );
        Ok(Self { members, trained: false })
    }

    /// Wraps members that have already been trained (or loaded from checkpoints).
    pub fn trained(members: Vec<EmbeddingNetwork<f32>>) -> Result<Self> {
        let mut e = Self::new(members)?;
        e.trained = true;
        Ok(e)
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn members(&self) -> &[EmbeddingNetwork<f32>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].arch.num_classes.expect("validated in new")
    }

    /// One softmax vector per member.
    pub fn predict(&self, image: &SpectrogramImage) -> Result<Vec<Vec<f64>>> {
        Ok(self.predict_batch(&[image])?.pop().expect("one image"))
    }

    /// `out[i][t]` is member `t`'s softmax for image `i`.
    pub fn predict_batch(&self, images: &[&SpectrogramImage]) -> Result<Vec<Vec<Vec<f64>>>> {
        if !self.trained {
            return Err(Error::Contract("ensemble has not been trained".into()));
        }
        let mut out = vec![Vec::with_capacity(self.members.len()); images.len()];
        for member in &self.members {
            for (i, logits) in member.logits(images)?.into_iter().enumerate() {
                let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
                out[i].push(softmax_normalize(&z));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    Aleatoric,
    Epistemic,
}

/// K×K matrices stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub num_classes: usize,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub mean_softmax: Vec<f64>,
}

impl UncertaintyReport {
    pub fn aleatoric_at(&self, i: usize, j: usize) -> f64 {
        self.aleatoric[i * self.num_classes + j]
    }

    pub fn epistemic_at(&self, i: usize, j: usize) -> f64 {
        self.epistemic[i * self.num_classes + j]
    }

    pub fn aleatoric_trace(&self) -> f64 {
        trace(&self.aleatoric, self.num_classes)
    }

    pub fn epistemic_trace(&self) -> f64 {
        trace(&self.epistemic, self.num_classes)
    }

    /// Class with the highest mean probability (smallest id on ties).
    pub fn predicted_class(&self) -> usize {
        argmax(&self.mean_softmax)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn trace(m: &[f64], k: usize) -> f64 {
    (0..k).map(|i| m[i * k + i]).sum()
}

fn check_simplex(c: &[f64], k: usize, t: usize) -> Result<()> {
    ensure!(c.len() == k, "softmax vector {t} has {} entries, expected {k}", c.len());
    ensure!(
        c.iter().all(|&v| v.is_finite() && v >= -SIMPLEX_TOL),
        "softmax vector {t} has a negative or non-finite entry"
    );
    let s: f64 = c.iter().sum();
    ensure!((s - 1.0).abs() <= SIMPLEX_TOL, "softmax vector {t} sums to {s}");
    Ok(())
}

pub fn decompose_uncertainty(softmax: &[Vec<f64>]) -> Result<UncertaintyReport> {
    ensure!(!softmax.is_empty(), "need at least one softmax vector");
    let k = softmax[0].len();
    ensure!(k > 0, "softmax vectors are empty");
    for (t, c) in softmax.iter().enumerate() {
        check_simplex(c, k, t)?;
    }
    let inv_t = 1.0 / softmax.len() as f64;
    let mut mean = vec![0.0; k];
    for c in softmax {
        for (m, &v) in mean.iter_mut().zip(c) {
            *m += v * inv_t;
        }
    }
    let mut aleatoric = vec![0.0; k * k];
    let mut epistemic = vec![0.0; k * k];
    for c in softmax {
        for i in 0..k {
            for j in 0..k {
                let diag = if i == j { c[i] } else { 0.0 };
                aleatoric[i * k + j] += (diag - c[i] * c[j]) * inv_t;
                epistemic[i * k + j] += (c[i] - mean[i]) * (c[j] - mean[j]) * inv_t;
            }
        }
    }
    Ok(UncertaintyReport { num_classes: k, aleatoric, epistemic, mean_softmax: mean })
}

/// Trace of the selected matrix.
pub fn scalar_uncertainty(report: &UncertaintyReport, kind: UncertaintyKind) -> f64 {
    match kind {
        UncertaintyKind::Aleatoric => report.aleatoric_trace(),
        UncertaintyKind::Epistemic => report.epistemic_trace(),
    }
}

/// Eigenvalues of a symmetric `k×k` row-major matrix by cyclic Jacobi rotation.
pub fn symmetric_eigenvalues(m: &[f64], k: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * k + j] * a[i * k + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = a[p * k + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * k + q] - a[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let arp = a[r * k + p];
                    let arq = a[r * k + q];
                    a[r * k + p] = c * arp - s * arq;
                    a[r * k + q] = s * arp + c * arq;
                }
                for r in 0..k {
                    let apr = a[p * k + r];
                    let aqr = a[q * k + r];
                    a[p * k + r] = c * apr - s * aqr;
                    a[q * k + r] = s * apr + c * aqr;
                }
            }
        }
    }
    (0..k).map(|i| a[i * k + i]).collect()
}
