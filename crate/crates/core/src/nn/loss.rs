use crate::error::{ensure_arg, Result};
use crate::tensor::Real;

/// Softmax cross-entropy of `logits` against `target`, with its gradient.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    ensure_arg!(logits.len() >= 2, "need at least two classes, got {}", logits.len());
    ensure_arg!(
        target < logits.len(),
        "target class {target} out of range for {} logits",
        logits.len()
    );
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() - (logits[target] - max);
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / total).collect();
    grad[target] -= T::one();
    Ok((loss, grad))
}

/// Result of [`cosine_similarity`].
#[derive(Debug, Clone)]
pub struct CosineSimilarity<T> {
    pub score: T,
    pub grad_a: Vec<T>,
    pub grad_b: Vec<T>,
    /// Set when either input has zero norm; score and gradients are then zero.
    pub degenerate: bool,
}

pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<CosineSimilarity<T>> {
    ensure_arg!(
        a.len() == b.len(),
        "cosine similarity of vectors with lengths {} and {}",
        a.len(),
        b.len()
    );
    let dot = |x: &[T], y: &[T]| x.iter().zip(y).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
    let aa = dot(a, a);
    let bb = dot(b, b);
    if aa == T::zero() || bb == T::zero() || !(aa * bb).is_normal() {
        return Ok(CosineSimilarity {
            score: T::zero(),
            grad_a: vec![T::zero(); a.len()],
            grad_b: vec![T::zero(); b.len()],
            degenerate: true,
        });
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    let inv = T::one() / (na * nb);
    let score = (dot(a, b) * inv).max(-T::one()).min(T::one());
    let grad_a = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y * inv - score * x / aa)
        .collect();
    let grad_b = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x * inv - score * y / bb)
        .collect();
    Ok(CosineSimilarity {
        score,
        grad_a,
        grad_b,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let (loss, grad) = softmax_cross_entropy(&[0.0f64; 10], 3).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        for (i, g) in grad.iter().enumerate() {
            let expected = if i == 3 { 0.1 - 1.0 } else { 0.1 };
            assert!((g - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn large_target_logit_is_stable() {
        let mut logits = vec![0.0f32; 10];
        logits[4] = 1000.0;
        let (loss, grad) = softmax_cross_entropy(&logits, 4).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(grad.iter().all(|g| g.is_finite()));
        let (loss, _) = softmax_cross_entropy(&logits, 0).unwrap();
        assert!((loss - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn target_out_of_range() {
        assert!(softmax_cross_entropy(&[0.0f64, 1.0], 2).is_err());
        assert!(softmax_cross_entropy(&[0.0f64], 0).is_err());
    }

    #[test]
    fn self_similarity_is_stationary() {
        let a = [0.3f64, -1.2, 2.0, 0.7];
        let cs = cosine_similarity(&a, &a).unwrap();
        assert!((cs.score - 1.0).abs() < 1e-15);
        assert!(cs.grad_a.iter().all(|g| g.abs() < 1e-12));
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&a, &neg).unwrap().score + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_is_flagged_not_fatal() {
        let cs = cosine_similarity(&[0.0f32; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert!(cs.degenerate);
        assert_eq!(cs.score, 0.0);
        assert!(cs.grad_a.iter().chain(&cs.grad_b).all(|&g| g == 0.0));
    }
}
