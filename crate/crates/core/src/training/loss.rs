use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Negative log-likelihood of `label` and its gradient with respect to the
/// probability vector.
pub fn cross_entropy_loss<T: Scalar>(probs: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= probs.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let floor = T::lit(PROB_FLOOR);
    let p = probs[label];
    let loss = -p.max(floor).ln();
    let mut grad = vec![T::zero(); probs.len()];
    grad[label] = if p >= floor { -p.recip() } else { -floor.recip() };
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_values() {
        assert_eq!(cross_entropy_loss(&[1.0f64, 0.0], 0).unwrap().0, 0.0);
        let u = vec![1.0 / 32.0; 32];
        assert!((cross_entropy_loss(&u, 5).unwrap().0 - 32f64.ln()).abs() < 1e-12);
        assert!((cross_entropy_loss(&[0.5f64, 0.5], 0).unwrap().0 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn floor_keeps_loss_finite() {
        let (l, g) = cross_entropy_loss(&[0.0f64, 1.0], 0).unwrap();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(g[0].is_finite());
    }

    #[test]
    fn label_out_of_range() {
        assert!(cross_entropy_loss(&[0.5f32, 0.5], 2).is_err());
    }
}
