//! Distances between diagonal-Gaussian posteriors and the parameter-diversity loss.
//!
//! For `N(mu1, diag(s1^2))` and `N(mu2, diag(s2^2))` the squared 2-Wasserstein
//! distance is `|mu1 - mu2|^2 + B^2`, and the Bures term collapses to
//! `|s1 - s2|^2` because diagonal matrices commute.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::softplus;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape("DiagonalGaussian", format!("mu has {} entries, sigma {}", mu.len(), sigma.len())));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::domain("DiagonalGaussian", format!("sigma must be positive, found {s}")));
        }
        Ok(DiagonalGaussian { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Which closed-form distance feeds the parameter-diversity loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMetric {
    #[default]
    W2,
    Kl,
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, format!("dimension {a} vs {b}")))
    }
}

/// Squared Bures distance between `diag(s1^2)` and `diag(s2^2)`.
pub fn bures_squared_diag(sigma1: &[f64], sigma2: &[f64]) -> Result<f64> {
    same_len("bures_squared_diag", sigma1.len(), sigma2.len())?;
    Ok(sigma1.iter().zip(sigma2).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `|mu1 - mu2|^2 + |s1 - s2|^2`.
pub fn w2_squared(q1: &DiagonalGaussian, q2: &DiagonalGaussian) -> Result<f64> {
    same_len("w2_squared", q1.dim(), q2.dim())?;
    let mean: f64 = q1.mu.iter().zip(&q2.mu).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(mean + bures_squared_diag(&q1.sigma, &q2.sigma)?)
}

/// `KL[q1 || q2] = sum log(s2/s1) + (s1^2 + (mu1 - mu2)^2) / (2 s2^2) - 1/2`.
pub fn kl_diag_gaussian(q1: &DiagonalGaussian, q2: &DiagonalGaussian) -> Result<f64> {
    same_len("kl_diag_gaussian", q1.dim(), q2.dim())?;
    Ok((0..q1.dim())
        .map(|j| {
            let (m1, s1, m2, s2) = (q1.mu[j], q1.sigma[j], q2.mu[j], q2.sigma[j]);
            (s2 / s1).ln() + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5
        })
        .sum())
}

pub fn posterior_distance(metric: ParamMetric, q1: &DiagonalGaussian, q2: &DiagonalGaussian) -> Result<f64> {
    match metric {
        ParamMetric::W2 => w2_squared(q1, q2),
        ParamMetric::Kl => kl_diag_gaussian(q1, q2),
    }
}

/// `log(1 + exp(-D))`, evaluated as `softplus(-D)`.
pub fn diverse_param_loss(distance: f64) -> f64 {
    softplus(-distance)
}

/// Graph handles for a flattened diagonal Gaussian: `1 x d` rows of means and std-devs.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Differentiable [`w2_squared`].
pub fn w2_squared_var(g: &mut Graph, q1: GaussianVars, q2: GaussianVars) -> Result<Var> {
    let dm = g.sub(q1.mu, q2.mu)?;
    let dm2 = g.mul(dm, dm)?;
    let ds = g.sub(q1.sigma, q2.sigma)?;
    let ds2 = g.mul(ds, ds)?;
    let a = g.sum(dm2)?;
    let b = g.sum(ds2)?;
    g.add(a, b)
}

/// Differentiable [`kl_diag_gaussian`].
pub fn kl_diag_gaussian_var(g: &mut Graph, q1: GaussianVars, q2: GaussianVars) -> Result<Var> {
    let ratio = g.div(q2.sigma, q1.sigma)?;
    let log_ratio = g.log(ratio)?;
    let s1sq = g.mul(q1.sigma, q1.sigma)?;
    let dm = g.sub(q1.mu, q2.mu)?;
    let dm2 = g.mul(dm, dm)?;
    let num = g.add(s1sq, dm2)?;
    let s2sq = g.mul(q2.sigma, q2.sigma)?;
    let den = g.scale(s2sq, 2.0)?;
    let frac = g.div(num, den)?;
    let t = g.add(log_ratio, frac)?;
    let t = g.add_scalar(t, -0.5)?;
    g.sum(t)
}

pub fn posterior_distance_var(g: &mut Graph, metric: ParamMetric, q1: GaussianVars, q2: GaussianVars) -> Result<Var> {
    match metric {
        ParamMetric::W2 => w2_squared_var(g, q1, q2),
        ParamMetric::Kl => kl_diag_gaussian_var(g, q1, q2),
    }
}

/// Differentiable [`diverse_param_loss`].
pub fn diverse_param_loss_var(g: &mut Graph, distance: Var) -> Result<Var> {
    let neg = g.neg(distance)?;
    g.softplus(neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Tensor;

    fn dg(mu: &[f64], sigma: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::new(mu.to_vec(), sigma.to_vec()).unwrap()
    }

    #[test]
    fn bures_examples() {
        assert_eq!(bures_squared_diag(&[0.3, 2.0], &[0.3, 2.0]).unwrap(), 0.0);
        assert_eq!(bures_squared_diag(&[1.0, 1.0], &[2.0, 3.0]).unwrap(), 5.0);
        assert_eq!(bures_squared_diag(&[2.0, 3.0], &[1.0, 1.0]).unwrap(), 5.0);
        assert!(bures_squared_diag(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn w2_examples() {
        let q1 = dg(&[1.0, 2.0], &[0.5, 0.5]);
        let q2 = dg(&[0.0, 0.0], &[1.0, 1.5]);
        assert!((w2_squared(&q1, &q2).unwrap() - 6.25).abs() < 1e-15);
        assert_eq!(w2_squared(&q1, &q1).unwrap(), 0.0);
        assert!(w2_squared(&q1, &dg(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn kl_examples() {
        let q1 = dg(&[0.0], &[1.0]);
        let q2 = dg(&[1.0], &[1.0]);
        assert!((kl_diag_gaussian(&q1, &q2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(kl_diag_gaussian(&q1, &q1).unwrap(), 0.0);
        let a = dg(&[0.2, -1.0], &[0.5, 2.0]);
        let b = dg(&[1.0, 0.0], &[1.5, 0.3]);
        let (ab, ba) = (kl_diag_gaussian(&a, &b).unwrap(), kl_diag_gaussian(&b, &a).unwrap());
        assert!((ab - ba).abs() > 1e-3);
    }

    #[test]
    fn diverse_param_loss_values() {
        assert!((diverse_param_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let sat = diverse_param_loss(1000.0);
        assert!(sat.is_finite() && sat >= 0.0 && sat < 1e-300);
        // ln(1 + e^-1)
        assert!((diverse_param_loss(1.0) - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn graph_versions_match_closed_forms() {
        let q1 = dg(&[0.1, -0.4, 2.0], &[0.5, 0.7, 1.1]);
        let q2 = dg(&[1.0, 0.3, -0.5], &[0.2, 0.9, 1.0]);
        for metric in [ParamMetric::W2, ParamMetric::Kl] {
            let mut g = Graph::new();
            let row = |g: &mut Graph, v: &[f64]| g.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()).unwrap();
            let a = GaussianVars { mu: row(&mut g, q1.mu()), sigma: row(&mut g, q1.sigma()) };
            let b = GaussianVars { mu: row(&mut g, q2.mu()), sigma: row(&mut g, q2.sigma()) };
            let d = posterior_distance_var(&mut g, metric, a, b).unwrap();
            let want = posterior_distance(metric, &q1, &q2).unwrap();
            assert!((g.value(d).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_wrapped_w2_passes_grad_check() {
        let point = vec![
            Tensor::new(vec![1, 3], vec![0.1, -0.2, 0.3]).unwrap(),
            Tensor::new(vec![1, 3], vec![-1.0, 0.5, 0.2]).unwrap(),
            Tensor::new(vec![1, 3], vec![0.4, 0.1, -0.3]).unwrap(),
            Tensor::new(vec![1, 3], vec![0.3, -2.0, 1.0]).unwrap(),
        ];
        let report = grad_check(
            |g, v| {
                let s1 = g.softplus(v[1])?;
                let s2 = g.softplus(v[3])?;
                let d = w2_squared_var(g, GaussianVars { mu: v[0], sigma: s1 }, GaussianVars { mu: v[2], sigma: s2 })?;
                diverse_param_loss_var(g, d)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
