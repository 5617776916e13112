//! Composites built from tape primitives: affine maps, feed-forward blocks,
//! and distribution divergences.

use crate::error::AutodiffError;
use crate::graph::{Graph, Var};

/// Floor added inside every logarithm of a probability, so that a
/// vanishing component yields a large-but-finite log instead of -inf.
pub const LOG_EPS: f64 = 1e-10;

/// Tolerance when validating that an input claims to be a distribution.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// KL(p || q) = sum_i p_i * (ln(p_i + eps) - ln(q_i + eps)) over two
/// distributions of identical shape (rank 1, or a single rank-2 row).
///
/// Both inputs must already sum to one within [`NORMALIZATION_TOL`];
/// anything else is a contract violation, not a silent renormalization.
pub fn kl_divergence(g: &mut Graph, p: Var, q: Var) -> Result<Var, AutodiffError> {
    let (ps, qs) = (g.shape(p).to_vec(), g.shape(q).to_vec());
    if ps != qs {
        return Err(AutodiffError::ShapeMismatch {
            op: "kl_divergence",
            details: format!("{:?} vs {:?}", ps, qs),
        });
    }
    for (name, v) in [("p", p), ("q", q)] {
        let sum: f64 = g.value(v).data().iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(AutodiffError::ContractViolation(format!(
                "kl_divergence: {} sums to {}, expected 1",
                name, sum
            )));
        }
        if g.value(v).data().iter().any(|&x| x < 0.0) {
            return Err(AutodiffError::ContractViolation(format!(
                "kl_divergence: {} has a negative component",
                name
            )));
        }
    }
    let p_shift = g.add_const(p, LOG_EPS);
    let q_shift = g.add_const(q, LOG_EPS);
    let log_p = g.ln(p_shift);
    let log_q = g.ln(q_shift);
    let diff = g.sub(log_p, log_q)?;
    let weighted = g.mul(p, diff)?;
    Ok(g.sum_all(weighted))
}

/// 1/2 * (KL(p||q) + KL(q||p)) — symmetric, still >= 0, zero iff p == q
/// (up to the log floor).
pub fn symmetric_kl(g: &mut Graph, p: Var, q: Var) -> Result<Var, AutodiffError> {
    let forward = kl_divergence(g, p, q)?;
    let reverse = kl_divergence(g, q, p)?;
    let total = g.add(forward, reverse)?;
    Ok(g.scale(total, 0.5))
}

/// Mean of all rows of `[n, d]`, as `[1, d]`.
pub fn mean_rows(g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let summed = g.sum_axis(x, 0)?;
    let scaled = g.scale(summed, 1.0 / n as f64);
    g.reshape(scaled, &[1, d])
}

/// Renormalizes a nonnegative vector to sum to one.
pub fn normalize(g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    let total = g.sum_all(x);
    g.div_scalar(x, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let q = g.constant(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let kl = kl_divergence(&mut g, p, q).unwrap();
        assert!(g.scalar_value(kl).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_scalar_formula() {
        let pv = [0.1, 0.6, 0.3];
        let qv = [0.3, 0.3, 0.4];
        let expected: f64 = pv
            .iter()
            .zip(qv.iter())
            .map(|(p, q)| p * ((p + LOG_EPS).ln() - (q + LOG_EPS).ln()))
            .sum();
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(pv.to_vec()));
        let q = g.input(Tensor::vector(qv.to_vec()));
        let kl = kl_divergence(&mut g, p, q).unwrap();
        assert!((g.scalar_value(kl).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_unnormalized_input() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.5, 0.6]));
        let q = g.constant(Tensor::vector(vec![0.5, 0.5]));
        assert!(matches!(
            kl_divergence(&mut g, p, q),
            Err(AutodiffError::ContractViolation(_))
        ));
    }

    #[test]
    fn symmetric_kl_is_symmetric() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.1, 0.9]));
        let q = g.constant(Tensor::vector(vec![0.7, 0.3]));
        let a = symmetric_kl(&mut g, p, q).unwrap();
        let b = symmetric_kl(&mut g, q, p).unwrap();
        assert_eq!(g.scalar_value(a).unwrap(), g.scalar_value(b).unwrap());
    }
}
