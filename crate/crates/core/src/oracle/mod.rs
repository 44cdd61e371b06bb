//! Closed-form gradients of the marginal retrieval likelihood with respect
//! to retrieval scores.
//!
//! With `p(d|x) = softmax(s/τ)_d` and `p(y|x) = Σ_d p(d|x)·p(y|x,d)`, the loss
//! `L = −log p(y|x)` has two gradient paths into each score:
//!
//! * the probability path `−(1/τ)·p_d·(p(y|x,d) − p(y|x)) / p(y|x)`, and
//! * when the generator conditions on the mixture `r = Σ_j π_j z_j`, the
//!   representation path `−(1/τ)·π_d·gᵀ(z_d − r)` with `g = ∇_r log p(y|x,r)`.
//!
//! These functions evaluate the formulas directly and are checked against
//! finite differences and the tape in [`suite`].

pub mod suite;

use crate::autodiff::{softmax_into, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CouplingInputs {
    /// Retrieval scores, one per candidate.
    pub scores: Vec<f64>,
    /// Per-candidate answer likelihoods `p(y|x,d)`.
    pub conditionals: Vec<f64>,
    pub temperature: f64,
    /// Candidate embeddings, `D × d`.
    pub embeddings: Tensor,
}

impl CouplingInputs {
    pub fn new(scores: Vec<f64>, conditionals: Vec<f64>, temperature: f64, embeddings: Tensor) -> Result<Self> {
        let d = scores.len();
        if d == 0 {
            return Err(Error::Empty("coupling inputs"));
        }
        if conditionals.len() != d || embeddings.shape().len() != 2 || embeddings.rows() != d {
            return Err(Error::shape("coupling inputs", &[d, conditionals.len()], embeddings.shape()));
        }
        if conditionals.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("conditional likelihoods must lie in [0, 1]".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if scores.iter().any(|s| !s.is_finite()) || !embeddings.is_finite() {
            return Err(Error::NonFinite("coupling inputs"));
        }
        Ok(Self {
            scores,
            conditionals,
            temperature,
            embeddings,
        })
    }

    pub fn candidates(&self) -> usize {
        self.scores.len()
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    /// Same inputs with different scores.
    pub fn with_scores(&self, scores: &[f64]) -> Self {
        Self {
            scores: scores.to_vec(),
            ..self.clone()
        }
    }
}

/// Differentiable answer model conditioned on a mixture embedding `r`.
pub trait MixtureGenerator {
    /// `log p(y|x,r)`
    fn log_likelihood(&self, r: &[f64]) -> f64;
    /// `∇_r log p(y|x,r)`
    fn gradient(&self, r: &[f64]) -> Vec<f64>;
}

/// `log p(y|x,r) = −‖r − target‖²`
#[derive(Clone, Debug)]
pub struct QuadraticGenerator {
    pub target: Vec<f64>,
}

impl MixtureGenerator for QuadraticGenerator {
    fn log_likelihood(&self, r: &[f64]) -> f64 {
        -r.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    fn gradient(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.target).map(|(a, b)| -2.0 * (a - b)).collect()
    }
}

/// Generator with zero gradient everywhere; decouples the two paths.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantGenerator;

impl MixtureGenerator for ConstantGenerator {
    fn log_likelihood(&self, _r: &[f64]) -> f64 {
        0.0
    }

    fn gradient(&self, r: &[f64]) -> Vec<f64> {
        vec![0.0; r.len()]
    }
}

/// Tempered retrieval distribution `softmax(s/τ)`; also the mixture weights π.
pub fn retrieval_distribution(inputs: &CouplingInputs) -> Vec<f64> {
    let mut p = vec![0.0; inputs.candidates()];
    softmax_into(&inputs.scores, inputs.temperature, &mut p);
    p
}

/// Returns `(p(d|x), p(y|x))`.
pub fn marginal_likelihood(inputs: &CouplingInputs) -> (Vec<f64>, f64) {
    let p_d = retrieval_distribution(inputs);
    let p_y = p_d.iter().zip(&inputs.conditionals).map(|(p, c)| p * c).sum();
    (p_d, p_y)
}

/// `r = Σ_j π_j z_j`
pub fn mixture(inputs: &CouplingInputs) -> Vec<f64> {
    let pi = retrieval_distribution(inputs);
    let width = inputs.width();
    let mut r = vec![0.0; width];
    for (j, w) in pi.iter().enumerate() {
        for (acc, z) in r.iter_mut().zip(inputs.embeddings.row(j)) {
            *acc += w * z;
        }
    }
    r
}

/// `−log Σ_d softmax(s/τ)_d · p(y|x,d)`
pub fn nonshared_loss(inputs: &CouplingInputs) -> f64 {
    -marginal_likelihood(inputs).1.ln()
}

/// Loss when each conditional factors as `p(y|x,d)·p(y|x,r)` with a shared
/// mixture `r`: `−log p(y|x) − log p(y|x,r)`.
pub fn shared_loss(inputs: &CouplingInputs, generator: &dyn MixtureGenerator) -> f64 {
    nonshared_loss(inputs) - generator.log_likelihood(&mixture(inputs))
}

fn likelihood_or_err(p_y: f64) -> Result<f64> {
    if p_y > 0.0 {
        Ok(p_y)
    } else {
        Err(Error::Degenerate {
            op: "marginal likelihood",
            detail: "p(y|x) is zero".into(),
        })
    }
}

/// Probability-path gradient `∂L/∂s_d = −(1/τ)·p_d·(p(y|x,d) − p(y|x)) / p(y|x)`.
pub fn nonshared_gradient(inputs: &CouplingInputs) -> Result<Vec<f64>> {
    let (p_d, p_y) = marginal_likelihood(inputs);
    let p_y = likelihood_or_err(p_y)?;
    let tau = inputs.temperature;
    Ok(p_d
        .iter()
        .zip(&inputs.conditionals)
        .map(|(p, c)| -p * (c - p_y) / (tau * p_y))
        .collect())
}

/// Unscaled probability-path terms `p_d·(p(y|x,d) − p(y|x))`; they sum to zero.
pub fn probability_path_terms(inputs: &CouplingInputs) -> Vec<f64> {
    let (p_d, p_y) = marginal_likelihood(inputs);
    p_d.iter()
        .zip(&inputs.conditionals)
        .map(|(p, c)| p * (c - p_y))
        .collect()
}

/// `∂r/∂s_d = (1/τ)·π_d·(z_d − r)`, one row per candidate.
pub fn mixture_jacobian(inputs: &CouplingInputs) -> Tensor {
    let pi = retrieval_distribution(inputs);
    let r = mixture(inputs);
    let (n, width) = (inputs.candidates(), inputs.width());
    let mut out = Tensor::zeros(&[n, width]);
    for d in 0..n {
        let z = inputs.embeddings.row(d);
        for c in 0..width {
            out.data_mut()[d * width + c] = pi[d] * (z[c] - r[c]) / inputs.temperature;
        }
    }
    out
}

/// Representation-path gradient `−(1/τ)·π_d·gᵀ(z_d − r)` for a given `g`.
pub fn representation_path(inputs: &CouplingInputs, g: &[f64]) -> Vec<f64> {
    let jac = mixture_jacobian(inputs);
    (0..inputs.candidates())
        .map(|d| -jac.row(d).iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Full gradient of [`shared_loss`]: probability path plus representation path.
pub fn shared_gradient(inputs: &CouplingInputs, generator: &dyn MixtureGenerator) -> Result<Vec<f64>> {
    let prob = nonshared_gradient(inputs)?;
    let g = generator.gradient(&mixture(inputs));
    let rep = representation_path(inputs, &g);
    Ok(prob.iter().zip(&rep).map(|(a, b)| a + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_difference, central_jacobian, compare, FD_STEP};

    fn inputs(scores: &[f64], cond: &[f64], tau: f64, emb: &[&[f64]]) -> CouplingInputs {
        let width = emb[0].len();
        let data = emb.concat();
        CouplingInputs::new(
            scores.to_vec(),
            cond.to_vec(),
            tau,
            Tensor::matrix(emb.len(), width, data).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn marginal_cases() {
        let i = inputs(&[0.2, 0.2, 0.2], &[1.0, 0.0, 0.0], 1.0, &[&[1.0], &[2.0], &[3.0]]);
        assert!((marginal_likelihood(&i).1 - 1.0 / 3.0).abs() < 1e-15);
        let i = inputs(&[0.9, -0.3, 0.1], &[0.4, 0.4, 0.4], 0.5, &[&[1.0], &[2.0], &[3.0]]);
        assert!((marginal_likelihood(&i).1 - 0.4).abs() < 1e-15);

        // Explicit summation.
        let i = inputs(&[0.5, -1.0, 0.25], &[0.2, 0.9, 0.6], 0.7, &[&[1.0], &[2.0], &[3.0]]);
        let w: Vec<f64> = i.scores.iter().map(|s| (s / 0.7).exp()).collect();
        let z: f64 = w.iter().sum();
        let expected: f64 = w.iter().zip(&i.conditionals).map(|(a, c)| a / z * c).sum();
        let (_, p_y) = marginal_likelihood(&i);
        assert!((p_y - expected).abs() < 1e-15);
        assert!(p_y >= 0.2 && p_y <= 0.9);
    }

    #[test]
    fn nonshared_cases() {
        let i = inputs(&[0.5, -0.2, 0.1], &[0.3, 0.3, 0.3], 1.0, &[&[1.0], &[2.0], &[3.0]]);
        assert!(nonshared_gradient(&i).unwrap().iter().all(|g| g.abs() < 1e-15));

        // Gradient descent direction raises s₁ and lowers s₂.
        let i = inputs(&[0.0, 0.0], &[1.0, 0.0], 1.0, &[&[1.0], &[2.0]]);
        let g = nonshared_gradient(&i).unwrap();
        assert!(g[0] < 0.0 && g[1] > 0.0);

        let i = inputs(&[0.0, 0.0], &[0.0, 0.0], 1.0, &[&[1.0], &[2.0]]);
        assert!(matches!(nonshared_gradient(&i), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn nonshared_matches_finite_differences() {
        let i = inputs(&[0.3, -0.7, 0.9, 0.0], &[0.8, 0.1, 0.35, 0.6], 0.6, &[&[0.0][..]; 4]);
        let numeric = central_difference(|s| nonshared_loss(&i.with_scores(s)), &i.scores, FD_STEP);
        let c = compare(&nonshared_gradient(&i).unwrap(), &numeric);
        assert!(c.passes(1e-6), "{c:?}");
        assert!(probability_path_terms(&i).iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn mixture_jacobian_cases() {
        let i = inputs(&[0.4], &[0.5], 1.0, &[&[1.0, -2.0]]);
        assert_eq!(mixture_jacobian(&i).data(), &[0.0, 0.0]);

        // Equal scores, z₂ = −z₁: r = 0, rows ±z₁/(2τ).
        let tau = 0.8;
        let i = inputs(&[0.3, 0.3], &[0.5, 0.5], tau, &[&[1.0, 2.0], &[-1.0, -2.0]]);
        let j = mixture_jacobian(&i);
        assert_eq!(j.row(0), &[1.0 / (2.0 * tau), 2.0 / (2.0 * tau)]);
        assert_eq!(j.row(1), &[-1.0 / (2.0 * tau), -2.0 / (2.0 * tau)]);

        let i = inputs(
            &[0.2, -0.5, 0.7],
            &[0.5, 0.5, 0.5],
            0.9,
            &[&[1.0, 0.5, -1.0], &[0.0, 2.0, 1.0], &[-1.5, 0.3, 0.2]],
        );
        let numeric = central_jacobian(|s| mixture(&i.with_scores(s)), &i.scores, FD_STEP);
        let c = compare(mixture_jacobian(&i).data(), &numeric.concat());
        assert!(c.passes(1e-6), "{c:?}");

        // τ·Σ π_d ∂r/∂s_d = Σ π_d² (z_d − r)
        let pi = retrieval_distribution(&i);
        let r = mixture(&i);
        for c in 0..3 {
            let lhs: f64 = (0..3).map(|d| pi[d] * j_at(&i, d, c) * i.temperature).sum();
            let rhs: f64 = (0..3).map(|d| pi[d] * pi[d] * (i.embeddings.get(d, c) - r[c])).sum();
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }

    fn j_at(i: &CouplingInputs, d: usize, c: usize) -> f64 {
        mixture_jacobian(i).get(d, c)
    }

    #[test]
    fn shared_cases() {
        let i = inputs(
            &[0.2, -0.5, 0.7],
            &[0.9, 0.2, 0.5],
            0.9,
            &[&[1.0, 0.5], &[0.0, 2.0], &[-1.5, 0.3]],
        );
        let a = shared_gradient(&i, &ConstantGenerator).unwrap();
        let b = nonshared_gradient(&i).unwrap();
        assert!(compare(&a, &b).max_abs_err <= 1e-12);

        // Identical embeddings: representation path vanishes.
        let same = inputs(&[0.2, -0.5, 0.7], &[0.9, 0.2, 0.5], 0.9, &[&[1.0, 0.5][..]; 3]);
        let gen = QuadraticGenerator {
            target: vec![0.3, -0.4],
        };
        let a = shared_gradient(&same, &gen).unwrap();
        let b = nonshared_gradient(&same).unwrap();
        assert!(compare(&a, &b).max_abs_err <= 1e-12);

        let numeric = central_difference(|s| shared_loss(&i.with_scores(s), &gen), &i.scores, FD_STEP);
        let c = compare(&shared_gradient(&i, &gen).unwrap(), &numeric);
        assert!(c.passes(1e-6), "{c:?}");
    }

    #[test]
    fn rejects_invalid_inputs() {
        let emb = Tensor::zeros(&[2, 1]);
        assert!(CouplingInputs::new(vec![0.0, 0.0], vec![1.5, 0.0], 1.0, emb.clone()).is_err());
        assert!(CouplingInputs::new(vec![0.0, 0.0], vec![0.5, 0.0], 0.0, emb.clone()).is_err());
        assert!(CouplingInputs::new(vec![0.0], vec![0.5, 0.0], 1.0, emb).is_err());
    }
}
