use peerbnn::rng;
use peerbnn::variational::{self, Architecture, BnnModel, PriorSpec, SamplingMode, VariationalLayer};
use peerbnn::Tensor;

fn layer() -> VariationalLayer {
    let mut layer = VariationalLayer::init(3, 2, variational::DEFAULT_INIT_RHO, &mut rng::stream(31, 0));
    for (k, x) in layer.rho_w.data_mut().iter_mut().enumerate() {
        *x = -2.0 + 0.5 * k as f64;
    }
    layer
}

#[test]
fn initial_sigma_is_five_hundredths() {
    let sigma = variational::sigma_from_rho(&Tensor::scalar(variational::DEFAULT_INIT_RHO));
    approx::assert_abs_diff_eq!(sigma.item(), 0.05, epsilon = 1e-15);
}

#[test]
fn bbb_draws_have_the_posterior_moments() {
    let l = layer();
    let sigma = l.sigma_w();
    let mut r = rng::stream(31, 1);
    let draws = 100_000;
    let n = l.mu_w.numel();
    let (mut s1, mut s2) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..draws {
        for (k, x) in variational::sample_bbb(&l, &mut r).w.data().iter().enumerate() {
            s1[k] += x;
            s2[k] += x * x;
        }
    }
    for k in 0..n {
        let mean = s1[k] / draws as f64;
        let var = s2[k] / draws as f64 - mean * mean;
        let s = sigma.data()[k];
        assert!((mean - l.mu_w.data()[k]).abs() < 5.0 * s / (draws as f64).sqrt());
        assert!((var / (s * s) - 1.0).abs() < 0.05, "weight {k}: {var} vs {}", s * s);
    }
}

#[test]
fn radial_direction_is_unit_and_radius_half_normal() {
    let mut r = rng::stream(31, 2);
    let draws = 100_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let (dir, radius) = variational::radial_parts(&[3, 4], &mut r);
        let norm = dir.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
        assert!(radius >= 0.0);
        total += radius;
    }
    let mean = total / draws as f64;
    assert!((mean - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01);
}

#[test]
fn radial_weights_lie_on_a_sphere_of_half_normal_radius() {
    let l = layer();
    let sigma = l.sigma_w();
    let mut r = rng::stream(31, 3);
    let draws = 20_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let w = variational::sample_radial(&l, &mut r).w;
        // (w - mu) / sigma is one radius times a unit vector
        let norm = w.data().iter().zip(l.mu_w.data()).zip(sigma.data()).map(|((w, m), s)| ((w - m) / s).powi(2)).sum::<f64>();
        total += norm.sqrt();
    }
    assert!((total / draws as f64 - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.02);
}

#[test]
fn zero_noise_forward_is_the_mean_network() {
    let arch = Architecture::mlp(&[2, 3, 2]).unwrap();
    let model = BnnModel::new(arch, SamplingMode::Bbb, PriorSpec::default(), &mut rng::stream(31, 4)).unwrap();
    let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
    let (z, _) = variational::forward_values(&model, &x, &model.mean_noise()).unwrap();
    // hand-rolled two-layer relu net on the means
    let l0 = &model.layers[0];
    let l1 = &model.layers[1];
    for i in 0..2 {
        let h: Vec<f64> = (0..3)
            .map(|j| (x.get2(i, 0) * l0.mu_w.get2(0, j) + x.get2(i, 1) * l0.mu_w.get2(1, j) + l0.mu_b.get2(0, j)).max(0.0))
            .collect();
        for c in 0..2 {
            let want = (0..3).map(|j| h[j] * l1.mu_w.get2(j, c)).sum::<f64>() + l1.mu_b.get2(0, c);
            approx::assert_abs_diff_eq!(z.get2(i, c), want, epsilon = 1e-12);
        }
    }
}
