//! Accuracy, Cohen's kappa and the embedding collapse statistic.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// True and predicted class ids over `n_classes` classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionSet {
    truth: Vec<usize>,
    predicted: Vec<usize>,
    n_classes: usize,
}

impl PredictionSet {
    pub fn new(truth: Vec<usize>, predicted: Vec<usize>, n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(
                "prediction_set",
                format!("{} truths vs {} predictions", truth.len(), predicted.len()),
            ));
        }
        if let Some(&bad) = truth.iter().chain(&predicted).find(|&&y| y >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(PredictionSet {
            truth,
            predicted,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    /// Observed agreement `P_o`.
    pub fn observed_agreement(&self) -> Result<f64> {
        accuracy(self)
    }

    /// Chance agreement `P_e = sum_i (n_true_i / n) (n_pred_i / n)`.
    pub fn chance_agreement(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Data("empty prediction set".into()));
        }
        let mut n_true = vec![0usize; self.n_classes];
        let mut n_pred = vec![0usize; self.n_classes];
        for (&t, &p) in self.truth.iter().zip(&self.predicted) {
            n_true[t] += 1;
            n_pred[p] += 1;
        }
        let n = self.len() as f64;
        Ok(n_true
            .iter()
            .zip(&n_pred)
            .map(|(&a, &b)| (a as f64 / n) * (b as f64 / n))
            .sum())
    }
}

/// Fraction of correct predictions.
pub fn accuracy(ps: &PredictionSet) -> Result<f64> {
    if ps.is_empty() {
        return Err(Error::Data("accuracy of an empty prediction set".into()));
    }
    let correct = ps.truth.iter().zip(&ps.predicted).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / ps.len() as f64)
}

/// Cohen's kappa `(P_o - P_e) / (1 - P_e)`.
///
/// Evaluated on integer counts as `(n * agree - chance) / (n^2 - chance)`
/// with `chance = sum_i n_true_i * n_pred_i`, so the result is the correctly
/// rounded value of the exact ratio. `Ok(None)` when `P_e == 1` (truth and
/// predictions all in one class), where the ratio is undefined.
pub fn kappa(ps: &PredictionSet) -> Result<Option<f64>> {
    if ps.is_empty() {
        return Err(Error::Data("kappa of an empty prediction set".into()));
    }
    let mut n_true = vec![0u128; ps.n_classes];
    let mut n_pred = vec![0u128; ps.n_classes];
    let mut agree = 0u128;
    for (&t, &p) in ps.truth.iter().zip(&ps.predicted) {
        n_true[t] += 1;
        n_pred[p] += 1;
        agree += u128::from(t == p);
    }
    let n = ps.len() as u128;
    let chance: u128 = n_true.iter().zip(&n_pred).map(|(a, b)| a * b).sum();
    if chance == n * n {
        return Ok(None);
    }
    let num = ((n * agree) as i128 - chance as i128) as f64;
    Ok(Some(num / (n * n - chance) as f64))
}

/// Default threshold below which embeddings count as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.1;
/// Default threshold above which embeddings count as healthy.
pub const HEALTHY_THRESHOLD: f64 = 0.5;

/// Spread of L2-normalized embeddings: mean per-dimension standard deviation
/// scaled by `sqrt(d)`. About 1 for isotropic embeddings, 0 when every
/// embedding points the same way.
pub fn collapse_stat<S: Scalar>(embeddings: &Tensor<S>) -> Result<f64> {
    let (n, d) = match *embeddings.shape() {
        [n, d] => (n, d),
        _ => {
            return Err(Error::shape(
                "collapse_stat",
                format!("expected [N, D], got {:?}", embeddings.shape()),
            ))
        }
    };
    if n < 2 || d == 0 {
        return Err(Error::Degenerate {
            op: "collapse_stat",
            detail: format!("need at least two non-empty embeddings, got {n} x {d}"),
        });
    }
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for i in 0..n {
        let row = embeddings.row(i);
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate {
                op: "collapse_stat",
                detail: format!("embedding {i} is the zero vector"),
            });
        }
        for j in 0..d {
            let u = row[j].as_f64() / norm;
            mean[j] += u;
            sq[j] += u * u;
        }
    }
    let nf = n as f64;
    let mean_std = (0..d)
        .map(|j| {
            let m = mean[j] / nf;
            (sq[j] / nf - m * m).max(0.0).sqrt()
        })
        .sum::<f64>()
        / d as f64;
    Ok(mean_std * (d as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(t: &[usize], p: &[usize], n: usize) -> PredictionSet {
        PredictionSet::new(t.to_vec(), p.to_vec(), n).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&ps(&[0, 1, 2], &[0, 1, 2], 3)).unwrap(), 1.0);
        assert_eq!(accuracy(&ps(&[0, 1], &[1, 0], 2)).unwrap(), 0.0);
        assert_eq!(accuracy(&ps(&[0, 0, 1, 1], &[0, 1, 1, 1], 2)).unwrap(), 0.75);
        assert!(accuracy(&ps(&[], &[], 2)).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa(&ps(&[0, 1, 2, 1], &[0, 1, 2, 1], 3)).unwrap(), Some(1.0));
        let adversarial = ps(&[0, 1, 0, 1], &[1, 0, 1, 0], 2);
        assert_eq!(adversarial.chance_agreement().unwrap(), 0.5);
        assert_eq!(kappa(&adversarial).unwrap(), Some(-1.0));
        // Single class on both sides: undefined.
        assert_eq!(kappa(&ps(&[0, 0, 0], &[0, 0, 0], 1)).unwrap(), None);
    }

    #[test]
    fn labels_validated() {
        assert!(PredictionSet::new(vec![0, 3], vec![0, 1], 3).is_err());
        assert!(PredictionSet::new(vec![0], vec![0, 1], 3).is_err());
    }

    #[test]
    fn identical_embeddings_collapse() {
        let t = Tensor::<f64>::new(vec![4, 3], [1.0, 2.0, -1.0].repeat(4)).unwrap();
        assert!(collapse_stat(&t).unwrap() < 1e-7);
        let zero = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(collapse_stat(&zero).is_err());
    }

    #[test]
    fn collapse_stat_ignores_row_scale() {
        let a = Tensor::<f64>::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::new(vec![3, 2], vec![5.0, 0.0, 0.0, 0.2, 3.0, 3.0]).unwrap();
        assert!((collapse_stat(&a).unwrap() - collapse_stat(&b).unwrap()).abs() < 1e-12);
    }
}
