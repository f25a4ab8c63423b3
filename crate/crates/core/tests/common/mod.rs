//! Reference implementations used as oracles by the integration and acceptance tests.
#![allow(dead_code)]

use peerbnn::autodiff::Graph;
use peerbnn::data::Batch;
use peerbnn::geometry::DiagonalGaussian;
use peerbnn::rng::Rng;
use peerbnn::variational::{self, BnnModel, LayerNoise};
use peerbnn::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;

const EPS: f64 = 1e-8;

fn cosine_kernel(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    0.5 * (dot / ((na.sqrt() + EPS) * (nb.sqrt() + EPS)) + 1.0)
}

/// `P[i][j] = K(i, j) / sum_{k != j} K(k, j)` with a zero diagonal, one pair at a time.
pub fn brute_conditional(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut p = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            if k != j {
                denom += cosine_kernel(&rows[k], &rows[j]);
            }
        }
        for i in 0..n {
            if i != j {
                p[i][j] = cosine_kernel(&rows[i], &rows[j]) / denom;
            }
        }
    }
    p
}

pub fn brute_feature_kl(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    let p = brute_conditional(from);
    let q = brute_conditional(to);
    let n = p.len();
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                total += p[i][j] * ((p[i][j] + EPS) / (q[i][j] + EPS)).ln();
            }
        }
    }
    total / n as f64
}

/// Sum over coordinates of the 1-D Gaussian optimal-transport cost.
pub fn w2_coordinatewise(q1: &DiagonalGaussian, q2: &DiagonalGaussian) -> f64 {
    let mut total = 0.0;
    for k in 0..q1.dim() {
        let dm = q1.mu()[k] - q2.mu()[k];
        let ds = q1.sigma()[k] - q2.sigma()[k];
        total += dm * dm + ds * ds;
    }
    total
}

fn log_density(q: &DiagonalGaussian, x: &[f64]) -> f64 {
    let mut lp = 0.0;
    for k in 0..x.len() {
        let z = (x[k] - q.mu()[k]) / q.sigma()[k];
        lp += -0.5 * z * z - q.sigma()[k].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    lp
}

/// Monte Carlo `KL[q1 || q2]` and its standard error.
pub fn mc_kl(q1: &DiagonalGaussian, q2: &DiagonalGaussian, draws: usize, rng: &mut Rng) -> (f64, f64) {
    let d = q1.dim();
    let mut x = vec![0.0; d];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        for k in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            x[k] = q1.mu()[k] + q1.sigma()[k] * e;
        }
        let v = log_density(q1, &x) - log_density(q2, &x);
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Probabilities whose labels are drawn from the predicted distribution itself.
pub fn calibrated_set(n: usize, classes: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(n * classes);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = classes - 1;
        for (c, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                label = c;
                break;
            }
        }
        data.extend(probs);
        labels.push(label);
    }
    (Tensor::new(vec![n, classes], data).unwrap(), labels)
}

/// Plain Adam over the variational parameters of one network.
#[derive(Clone, Debug)]
pub struct RefNet {
    pub model: BnnModel,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const B1: f64 = 0.9;
const B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl RefNet {
    pub fn new(model: BnnModel) -> Self {
        let sizes: Vec<usize> =
            model.layers.iter().flat_map(|l| [l.mu_w.numel(), l.rho_w.numel(), l.mu_b.numel(), l.rho_b.numel()]).collect();
        RefNet { m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect(), model, t: 0 }
    }

    fn adam(&mut self, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let params =
            self.model.layers.iter_mut().flat_map(|l| [&mut l.mu_w, &mut l.rho_w, &mut l.mu_b, &mut l.rho_b]);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..g.numel() {
                let gk = g.data()[k];
                m[k] = B1 * m[k] + (1.0 - B1) * gk;
                v[k] = B2 * v[k] + (1.0 - B2) * gk * gk;
                p.data_mut()[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn softened(model: &BnnModel, x: &Tensor, noise: &[LayerNoise], t: f64) -> Tensor {
    let mut g = Graph::new();
    let vars = model.register(&mut g, false).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let out = variational::forward(&mut g, model, &vars, xv, noise).unwrap();
    let z = g.scale(out.logits, 1.0 / t).unwrap();
    let p = g.softmax(z).unwrap();
    g.value(p).clone()
}

/// Gradient of `ELBO + T^2 KL[peer || own]` with respect to `mu_w, rho_w, mu_b, rho_b` per layer.
fn dml_grads(model: &BnnModel, batch: &Batch, noise: &[LayerNoise], peer: &Tensor, t: f64, n_data: usize) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, true).unwrap();
    let x = g.constant(batch.x.clone()).unwrap();
    let elbo = variational::elbo_loss(&mut g, model, &vars, x, &batch.y, noise, n_data).unwrap();
    let n = batch.y.len() as f64;
    let neg_entropy: f64 = peer.data().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let z = g.scale(elbo.forward.logits, 1.0 / t).unwrap();
    let log_q = g.log_softmax(z).unwrap();
    let p = g.constant(peer.clone()).unwrap();
    let cross = g.mul(p, log_q).unwrap();
    let cross = g.sum(cross).unwrap();
    let kl = g.neg(cross).unwrap();
    let kl = g.add_scalar(kl, neg_entropy).unwrap();
    let kl = g.scale(kl, 1.0 / n).unwrap();
    let kl = g.scale(kl, t * t).unwrap();
    let loss = g.add(elbo.loss, kl).unwrap();
    g.backward(loss).unwrap();
    vars.all().into_iter().map(|v| g.grad(v).unwrap()).collect()
}

/// Plain two-network mutual learning: B1 distils from B2, then B2 from the updated B1.
pub fn dml_step(b1: &mut RefNet, b2: &mut RefNet, batch: &Batch, t: f64, lr: f64, n_data: usize, rng: &mut Rng) {
    let noise1 = b1.model.sample_noise(rng);
    let noise2 = b2.model.sample_noise(rng);
    let soft2 = softened(&b2.model, &batch.x, &noise2, t);
    let g1 = dml_grads(&b1.model, batch, &noise1, &soft2, t, n_data);
    b1.adam(&g1, lr);
    let soft1 = softened(&b1.model, &batch.x, &noise1, t);
    let g2 = dml_grads(&b2.model, batch, &noise2, &soft1, t, n_data);
    b2.adam(&g2, lr);
}

pub fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

pub fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}
