use crate::Scalar;
use serde::{Deserialize, Serialize};

/// Normalization applied to embeddings before pairwise distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingNorm {
    #[default]
    Softmax,
    L2,
    None,
}

impl EmbeddingNorm {
    pub fn apply<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        match self {
            EmbeddingNorm::Softmax => softmax_normalize(x),
            EmbeddingNorm::L2 => l2_normalize(x),
            EmbeddingNorm::None => x.to_vec(),
        }
    }

    /// Pulls `d_out` (gradient w.r.t. `apply(x)`) back to a gradient w.r.t. `x`.
    pub fn backward<T: Scalar>(&self, x: &[T], d_out: &[T]) -> Vec<T> {
        match self {
            EmbeddingNorm::Softmax => {
                let y = softmax_normalize(x);
                let dot: T = y.iter().zip(d_out).map(|(&a, &b)| a * b).sum();
                y.iter().zip(d_out).map(|(&yi, &gi)| yi * (gi - dot)).collect()
            }
            EmbeddingNorm::L2 => {
                let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm == T::zero() {
                    return vec![T::zero(); x.len()];
                }
                let y: Vec<T> = x.iter().map(|&v| v / norm).collect();
                let dot: T = y.iter().zip(d_out).map(|(&a, &b)| a * b).sum();
                y.iter().zip(d_out).map(|(&yi, &gi)| (gi - yi * dot) / norm).collect()
            }
            EmbeddingNorm::None => d_out.to_vec(),
        }
    }
}

/// Softmax with max-subtraction.
pub fn softmax_normalize<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Unit-length rescaling; the zero vector maps to itself.
pub fn l2_normalize<T: Scalar>(x: &[T]) -> Vec<T> {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm == T::zero() {
        return x.to_vec();
    }
    x.iter().map(|&v| v / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let y = softmax_normalize(&[2.5f64; 8]);
        assert!(y.iter().all(|&v| (v - 0.125).abs() < 1e-15));
        let y = softmax_normalize(&[0.0f64, 3f64.ln()]);
        assert!((y[0] - 0.25).abs() < 1e-12 && (y[1] - 0.75).abs() < 1e-12);
        let big = softmax_normalize(&[1000.0f64, 0.0]);
        assert!(big[0].is_finite() && (big[0] - 1.0).abs() < 1e-12);
    }

    fn fd_check(norm: EmbeddingNorm, x: &[f64], up: &[f64]) {
        let f = |v: &[f64]| norm.apply(v).iter().zip(up).map(|(a, b)| a * b).sum::<f64>();
        let g = norm.backward(x, up);
        for i in 0..x.len() {
            let eps = 1e-5;
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += eps;
            m[i] -= eps;
            let num = (f(&p) - f(&m)) / (2.0 * eps);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "{norm:?} coord {i}: analytic {} numeric {num}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn softmax_simplex_and_shift(x in prop::collection::vec(-20.0f64..20.0, 1..16), c in -50.0f64..50.0) {
            let y = softmax_normalize(&x);
            prop_assert!(y.iter().all(|&v| v > 0.0));
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let z = softmax_normalize(&shifted);
            for (a, b) in y.iter().zip(&z) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn normalization_gradients(x in prop::collection::vec(-3.0f64..3.0, 2..10), seed in 0u64..1000) {
            let up: Vec<f64> = (0..x.len()).map(|i| ((seed as f64 + i as f64) * 0.7).sin()).collect();
            fd_check(EmbeddingNorm::Softmax, &x, &up);
            if x.iter().map(|v| v * v).sum::<f64>() > 0.1 {
                fd_check(EmbeddingNorm::L2, &x, &up);
            }
        }
    }
}
