mod common;

use nalgebra::{DMatrix, DVector};
use peerbnn::geometry::{self, DiagonalGaussian, ParamMetric};
use peerbnn::rng;
use proptest::prelude::*;
use rand::Rng as _;

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|m1 - m2|^2 + tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2)` on dense covariances.
fn bures_full(q1: &DiagonalGaussian, q2: &DiagonalGaussian) -> f64 {
    let m1 = DVector::from_column_slice(q1.mu());
    let m2 = DVector::from_column_slice(q2.mu());
    let s1 = DMatrix::from_diagonal(&DVector::from_iterator(q1.dim(), q1.sigma().iter().map(|s| s * s)));
    let s2 = DMatrix::from_diagonal(&DVector::from_iterator(q2.dim(), q2.sigma().iter().map(|s| s * s)));
    let r2 = psd_sqrt(&s2);
    let cross = psd_sqrt(&(&r2 * &s1 * &r2));
    (m1 - m2).norm_squared() + (s1 + s2 - cross * 2.0).trace()
}

fn random_gaussian(d: usize, r: &mut rng::Rng) -> DiagonalGaussian {
    let mu = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
    let sigma = (0..d).map(|_| r.random_range(0.05..2.0)).collect();
    DiagonalGaussian::new(mu, sigma).unwrap()
}

#[test]
fn diagonal_formula_matches_dense_bures_trace() {
    let mut r = rng::stream(11, 0);
    for _ in 0..300 {
        let d = r.random_range(1..=4);
        let q1 = random_gaussian(d, &mut r);
        let q2 = random_gaussian(d, &mut r);
        let got = geometry::w2_squared(&q1, &q2).unwrap();
        approx::assert_abs_diff_eq!(got, bures_full(&q1, &q2), epsilon = 1e-10);
    }
}

#[test]
fn kl_matches_monte_carlo() {
    let mut r = rng::stream(12, 0);
    for k in 0..5 {
        let q1 = random_gaussian(2, &mut r);
        let q2 = DiagonalGaussian::new(q1.mu().iter().map(|m| m + 0.3).collect(), q1.sigma().iter().map(|s| s * 1.2).collect()).unwrap();
        let exact = geometry::kl_diag_gaussian(&q1, &q2).unwrap();
        let (mc, se) = common::mc_kl(&q1, &q2, 200_000, &mut rng::stream(12, k + 1));
        assert!((exact - mc).abs() < 4.0 * se, "pair {k}: {exact} vs {mc} +- {se}");
    }
}

#[test]
fn kl_is_asymmetric_and_zero_on_the_diagonal() {
    let a = DiagonalGaussian::new(vec![0.0, 1.0], vec![1.0, 0.5]).unwrap();
    let b = DiagonalGaussian::new(vec![0.5, 1.0], vec![2.0, 0.5]).unwrap();
    assert_eq!(geometry::kl_diag_gaussian(&a, &a).unwrap(), 0.0);
    let ab = geometry::kl_diag_gaussian(&a, &b).unwrap();
    let ba = geometry::kl_diag_gaussian(&b, &a).unwrap();
    assert!((ab - ba).abs() > 0.1);
}

#[test]
fn diversity_loss_is_bounded_and_decreasing() {
    approx::assert_abs_diff_eq!(geometry::diverse_param_loss(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
    approx::assert_relative_eq!(geometry::diverse_param_loss(5.0), (1.0 + (-5.0f64).exp()).ln(), max_relative = 1e-14);
    assert!(geometry::diverse_param_loss(1e6) >= 0.0);
    assert!(geometry::diverse_param_loss(2.0) < geometry::diverse_param_loss(1.0));
}

#[test]
fn dimension_mismatch_is_an_error() {
    let a = DiagonalGaussian::new(vec![0.0], vec![1.0]).unwrap();
    let b = DiagonalGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    assert!(geometry::w2_squared(&a, &b).is_err());
    assert!(geometry::posterior_distance(ParamMetric::Kl, &a, &b).is_err());
}

fn gaussian_strategy(d: usize) -> impl Strategy<Value = DiagonalGaussian> {
    (prop::collection::vec(-5.0..5.0f64, d), prop::collection::vec(0.01..3.0f64, d))
        .prop_map(|(m, s)| DiagonalGaussian::new(m, s).unwrap())
}

proptest! {
    #[test]
    fn w2_matches_coordinate_sum(d in 1usize..40, seed in any::<u64>()) {
        let mut r = rng::stream(seed, 0);
        let q1 = random_gaussian(d, &mut r);
        let q2 = random_gaussian(d, &mut r);
        let got = geometry::w2_squared(&q1, &q2).unwrap();
        prop_assert!((got - common::w2_coordinatewise(&q1, &q2)).abs() <= 1e-10);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn root_w2_obeys_the_triangle_inequality(
        a in gaussian_strategy(3), b in gaussian_strategy(3), c in gaussian_strategy(3)
    ) {
        let w = |x: &DiagonalGaussian, y: &DiagonalGaussian| geometry::w2_squared(x, y).unwrap().sqrt();
        prop_assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-12);
        prop_assert!((w(&a, &b) - w(&b, &a)).abs() <= 1e-12);
    }

    #[test]
    fn kl_is_non_negative(a in gaussian_strategy(4), b in gaussian_strategy(4)) {
        prop_assert!(geometry::kl_diag_gaussian(&a, &b).unwrap() >= -1e-12);
    }
}
