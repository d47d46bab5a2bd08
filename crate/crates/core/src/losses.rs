//! Cross-entropy and the pairwise metric-learning losses, each returning
//! the loss value together with exact gradients w.r.t. its inputs.
//!
//! Hinges use subgradient 0 at the kink, and the gradient of a Euclidean
//! distance is taken as 0 where the distance itself is 0.

use crate::error::{ensure, Result};
use crate::nn::softmax_normalize;
use crate::Scalar;
use serde::{Deserialize, Serialize};

/// Margins of the three pairwise losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum PairwiseLoss {
    Contrastive { alpha: f64 },
    Triplet { alpha: f64 },
    Quadruplet { alpha1: f64, alpha2: f64 },
}

/// Triplet margins searched in the evaluation grid.
pub const TRIPLET_MARGIN_GRID: [f64; 7] = [2.0, 3.0, 5.0, 7.0, 10.0, 50.0, 100.0];
/// Quadruplet `(alpha1, alpha2)` pairs searched in the evaluation grid.
pub const QUADRUPLET_MARGIN_GRID: [(f64, f64); 6] =
    [(2.0, 5.0), (5.0, 6.0), (5.0, 10.0), (10.0, 50.0), (50.0, 60.0), (50.0, 100.0)];

impl PairwiseLoss {
    pub fn validate(&self) -> Result<()> {
        let ok = |m: f64| m.is_finite() && m > 0.0;
        match *self {
            PairwiseLoss::Contrastive { alpha } | PairwiseLoss::Triplet { alpha } => {
                ensure!(ok(alpha), "margin must be positive, got {alpha}")
            }
            PairwiseLoss::Quadruplet { alpha1, alpha2 } => {
                ensure!(ok(alpha1) && ok(alpha2), "margins must be positive, got ({alpha1}, {alpha2})")
            }
        }
        Ok(())
    }

    pub fn needs_similar(&self) -> bool {
        matches!(self, PairwiseLoss::Quadruplet { .. })
    }

    pub fn evaluate<T: Scalar>(&self, batch: &PairBatch<T>) -> Result<LossOutput<T>> {
        self.validate()?;
        match *self {
            PairwiseLoss::Contrastive { alpha } => contrastive_loss(batch, T::of(alpha)),
            PairwiseLoss::Triplet { alpha } => triplet_loss(batch, T::of(alpha)),
            PairwiseLoss::Quadruplet { alpha1, alpha2 } => quadruplet_loss(batch, T::of(alpha1), T::of(alpha2)),
        }
    }
}

/// Aligned embedding lists; `similars` only for the quadruplet loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairBatch<T> {
    pub anchors: Vec<Vec<T>>,
    pub positives: Vec<Vec<T>>,
    pub negatives: Vec<Vec<T>>,
    pub similars: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.anchors.len();
        ensure!(
            self.positives.len() == n && self.negatives.len() == n,
            "pair batch lists misaligned: {n} anchors, {} positives, {} negatives",
            self.positives.len(),
            self.negatives.len()
        );
        if let Some(s) = &self.similars {
            ensure!(s.len() == n, "{} similars for {n} anchors", s.len());
        }
        Ok(())
    }
}

/// Loss value and gradients aligned with the batch lists.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub d_anchors: Vec<Vec<T>>,
    pub d_positives: Vec<Vec<T>>,
    pub d_negatives: Vec<Vec<T>>,
    pub d_similars: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> LossOutput<T> {
    fn zeros(batch: &PairBatch<T>) -> Self {
        let z = |v: &Vec<Vec<T>>| v.iter().map(|e| vec![T::zero(); e.len()]).collect::<Vec<_>>();
        Self {
            loss: T::zero(),
            d_anchors: z(&batch.anchors),
            d_positives: z(&batch.positives),
            d_negatives: z(&batch.negatives),
            d_similars: batch.similars.as_ref().map(z),
        }
    }
}

pub fn euclidean_distance<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    ensure!(u.len() == v.len(), "dimension mismatch: {} vs {}", u.len(), v.len());
    Ok(u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt())
}

/// Distance plus the unit direction `(u - v) / d` (zero when `d == 0`).
fn distance_with_grad<T: Scalar>(u: &[T], v: &[T]) -> Result<(T, Vec<T>)> {
    let d = euclidean_distance(u, v)?;
    let dir = if d > T::zero() {
        u.iter().zip(v).map(|(&a, &b)| (a - b) / d).collect()
    } else {
        vec![T::zero(); u.len()]
    };
    Ok((d, dir))
}

fn axpy<T: Scalar>(acc: &mut [T], scale: T, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

fn reject_similars<T>(batch: &PairBatch<T>) -> Result<()> {
    ensure!(batch.similars.is_none(), "this loss takes no similar samples");
    Ok(())
}

/// `sum_i d(a,p)^2 + max(alpha - d(a,n), 0)^2`.
pub fn contrastive_loss<T: Scalar>(batch: &PairBatch<T>, alpha: T) -> Result<LossOutput<T>> {
    batch.validate()?;
    reject_similars(batch)?;
    let mut out = LossOutput::zeros(batch);
    let two = T::of(2.0);
    for i in 0..batch.len() {
        let (dp, up) = distance_with_grad(&batch.anchors[i], &batch.positives[i])?;
        let (dn, un) = distance_with_grad(&batch.anchors[i], &batch.negatives[i])?;
        out.loss += dp * dp;
        // d(dp^2)/da = 2 (a - p)
        axpy(&mut out.d_anchors[i], two * dp, &up);
        axpy(&mut out.d_positives[i], -two * dp, &up);
        let gap = alpha - dn;
        if gap > T::zero() {
            out.loss += gap * gap;
            axpy(&mut out.d_anchors[i], -two * gap, &un);
            axpy(&mut out.d_negatives[i], two * gap, &un);
        }
    }
    Ok(out)
}

/// `sum_i max(d(a,p) - d(a,n) + alpha, 0)`.
pub fn triplet_loss<T: Scalar>(batch: &PairBatch<T>, alpha: T) -> Result<LossOutput<T>> {
    batch.validate()?;
    reject_similars(batch)?;
    let mut out = LossOutput::zeros(batch);
    for i in 0..batch.len() {
        let (dp, up) = distance_with_grad(&batch.anchors[i], &batch.positives[i])?;
        let (dn, un) = distance_with_grad(&batch.anchors[i], &batch.negatives[i])?;
        let h = dp - dn + alpha;
        if h > T::zero() {
            out.loss += h;
            axpy(&mut out.d_anchors[i], T::one(), &up);
            axpy(&mut out.d_positives[i], -T::one(), &up);
            axpy(&mut out.d_anchors[i], -T::one(), &un);
            axpy(&mut out.d_negatives[i], T::one(), &un);
        }
    }
    Ok(out)
}

/// `sum_i max(d(a,p) - d(a,s) + alpha1, 0) + sum_i max(d(a,s) - d(a,n) + alpha2, 0)`.
pub fn quadruplet_loss<T: Scalar>(batch: &PairBatch<T>, alpha1: T, alpha2: T) -> Result<LossOutput<T>> {
    batch.validate()?;
    let similars = batch
        .similars
        .as_ref()
        .ok_or_else(|| crate::Error::invalid("quadruplet loss needs similar samples"))?;
    let mut out = LossOutput::zeros(batch);
    for i in 0..batch.len() {
        let a = &batch.anchors[i];
        let (dp, up) = distance_with_grad(a, &batch.positives[i])?;
        let (ds, us) = distance_with_grad(a, &similars[i])?;
        let (dn, un) = distance_with_grad(a, &batch.negatives[i])?;
        let d_sim = out.d_similars.as_mut().expect("similar grads");
        let h1 = dp - ds + alpha1;
        if h1 > T::zero() {
            out.loss += h1;
            axpy(&mut out.d_anchors[i], T::one(), &up);
            axpy(&mut out.d_positives[i], -T::one(), &up);
            axpy(&mut out.d_anchors[i], -T::one(), &us);
            axpy(&mut d_sim[i], T::one(), &us);
        }
        let h2 = ds - dn + alpha2;
        if h2 > T::zero() {
            out.loss += h2;
            axpy(&mut out.d_anchors[i], T::one(), &us);
            axpy(&mut d_sim[i], -T::one(), &us);
            axpy(&mut out.d_anchors[i], -T::one(), &un);
            axpy(&mut out.d_negatives[i], T::one(), &un);
        }
    }
    Ok(out)
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    ensure!(label < logits.len(), "label {label} out of range for {} classes", logits.len());
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let log_sum = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = softmax_normalize(logits);
    grad[label] -= T::one();
    Ok((loss, grad))
}
