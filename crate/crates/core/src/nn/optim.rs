use super::GradientVector;
use crate::error::{ensure, Error, Result};
use crate::Scalar;

/// Plain SGD with decoupled-from-bias weight decay:
/// `p <- p - lr * (g + weight_decay * p)`, with no decay where
/// `bias_mask[i]` is set.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &GradientVector<T>,
    lr: T,
    weight_decay: T,
    bias_mask: &[bool],
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == bias_mask.len(),
        "sgd vectors misaligned: {} params, {} grads, {} mask",
        params.len(),
        grads.len(),
        bias_mask.len()
    );
    if let Some(i) = grads.0.iter().position(|g| g.is_nan()) {
        return Err(Error::Numerical(format!("NaN gradient at parameter {i}")));
    }
    let updated: Vec<T> = params
        .iter()
        .zip(&grads.0)
        .zip(bias_mask)
        .map(|((&p, &g), &is_bias)| {
            let decay = if is_bias { T::zero() } else { weight_decay * p };
            p - lr * (g + decay)
        })
        .collect();
    if let Some(i) = updated.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numerical(format!("update would make parameter {i} non-finite")));
    }
    params.copy_from_slice(&updated);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut p = vec![0.3f64, -1.2, 4.0];
        sgd_step(&mut p, &GradientVector(vec![0.0; 3]), 0.01, 0.0, &[false; 3]).unwrap();
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn direct_substitution() {
        let mut p = vec![1.0f64];
        sgd_step(&mut p, &GradientVector(vec![1.0]), 0.01, 0.0005, &[false]).unwrap();
        assert!((p[0] - 0.989995).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_weights_but_not_biases() {
        let mut p = vec![2.0f64, -2.0, 2.0];
        sgd_step(&mut p, &GradientVector(vec![0.0; 3]), 0.1, 0.01, &[false, false, true]).unwrap();
        assert!(p[0].abs() < 2.0 && p[1].abs() < 2.0);
        assert_eq!(p[2], 2.0);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = vec![1.0f32, 2.0];
        let err = sgd_step(&mut p, &GradientVector(vec![0.0, f32::NAN]), 0.01, 0.0, &[false; 2]);
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert_eq!(p, vec![1.0, 2.0]);
    }
}
