use rand::Rng;

use crate::error::{Error, Result};

/// Per-bag sampling weight of each class, proportional to the inverse class
/// count and normalised to sum 1. A class's total draw mass is then
/// `count × weight`, equal across classes.
pub fn oversampling_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    if class_counts.is_empty() {
        return Err(Error::invalid("no classes"));
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {c} has zero count")));
    }
    let inv: Vec<f64> = class_counts.iter().map(|&n| 1.0 / n as f64).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / total).collect())
}

/// Draws bags under inverse-frequency weights: a class is picked with
/// probability proportional to `count × weight`, then a bag uniformly within
/// it.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    cumulative: Vec<f64>,
}

impl BalancedSampler {
    /// `labels[i]` is the class of candidate `i`; classes absent from
    /// `labels` are never drawn.
    pub fn new(labels: &[usize], n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("cannot sample from an empty split"));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_classes {
                return Err(Error::invalid(format!("label {l} out of range for {n_classes} classes")));
            }
            by_class[l].push(i);
        }
        by_class.retain(|v| !v.is_empty());
        let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let weights = oversampling_weights(&counts)?;
        let mass: Vec<f64> = weights.iter().zip(&counts).map(|(w, &n)| w * n as f64).collect();
        let total: f64 = mass.iter().sum();
        let mut acc = 0.0;
        let cumulative = mass
            .iter()
            .map(|m| {
                acc += m / total;
                acc
            })
            .collect();
        Ok(BalancedSampler { by_class, cumulative })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let c = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.by_class.len() - 1);
        let members = &self.by_class[c];
        members[rng.random_range(0..members.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::prng;

    #[test]
    fn inverse_count_weights() {
        let w = oversampling_weights(&[2, 8]).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-12 && (w[1] - 0.2).abs() < 1e-12);
        let w = oversampling_weights(&[5, 5, 5]).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(oversampling_weights(&[3, 0]).is_err());
    }

    #[test]
    fn drawn_classes_are_balanced() {
        let mut labels = vec![0; 10];
        labels.extend(vec![1; 30]);
        labels.extend(vec![2; 60]);
        let s = BalancedSampler::new(&labels, 3).unwrap();
        let mut rng = prng(11);
        let n = 100_000;
        let mut freq = [0usize; 3];
        for _ in 0..n {
            freq[labels[s.draw(&mut rng)]] += 1;
        }
        for f in freq {
            assert!((f as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{freq:?}");
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(BalancedSampler::new(&[], 2).is_err());
    }
}
