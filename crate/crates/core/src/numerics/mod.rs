//! Dense tensors, reverse-mode differentiation and optimization.

pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{softmax_rows, Gradients, Graph, NodeId};
pub use optim::{decayed_lr, AdamConfig, AdamState};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `dot(p, z) / (|p| |z|)`.
pub fn cosine_similarity<S: Scalar>(p: &[S], z: &[S]) -> Result<S> {
    if p.len() != z.len() || p.is_empty() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} and {}", p.len(), z.len()),
        ));
    }
    let pp = p.iter().map(|&v| v * v).sum::<S>();
    let zz = z.iter().map(|&v| v * v).sum::<S>();
    if pp == S::zero() || zz == S::zero() {
        return Err(Error::Degenerate {
            op: "cosine_similarity",
            detail: "zero-norm vector".into(),
        });
    }
    let dot: S = p.iter().zip(z).map(|(&a, &b)| a * b).sum();
    Ok(dot / (pp * zz).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0f64, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        let oracle = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        assert!((c - oracle).abs() < 1e-15);
        assert!((c - 0.9746).abs() < 1e-4);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&[0.0f64, 0.0], &[1.0, 1.0]),
            Err(Error::Degenerate { .. })
        ));
        assert!(cosine_similarity(&[1.0f64], &[1.0, 2.0]).is_err());
    }
}
