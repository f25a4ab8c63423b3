//! Mean-field Gaussian layers and networks.
//!
//! Every weight and bias carries a mean `mu` and a pre-std `rho`, with
//! `sigma = softplus(rho)`. A forward pass draws one weight sample through the
//! reparameterisation `w = mu + sigma * noise`, where the noise tensor comes from
//! either the Bayes-by-Backprop rule (`eps`) or the radial rule
//! (`eps / |eps| * |r|`, one radius per weight tensor).

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::DiagonalGaussian;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// `rho` giving `softplus(rho) == 0.05`.
pub const DEFAULT_INIT_RHO: f64 = -2.970_628_109_057_377;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Bbb,
    #[default]
    Radial,
}

/// Zero-mean isotropic Gaussian prior over all weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { std: 0.1 }
    }
}

impl PriorSpec {
    pub fn new(std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidArgument(format!("prior std must be positive, got {std}")));
        }
        Ok(PriorSpec { std })
    }
}

/// Layer widths and the partition of layers into feature blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[input, hidden..., classes]`.
    pub widths: Vec<usize>,
    /// Exclusive end layer index of each block; strictly increasing, last equals
    /// the layer count. Block `k` (1-based) exposes the activation after layer
    /// `block_ends[k - 1] - 1`.
    pub block_ends: Vec<usize>,
}

impl Architecture {
    /// One block per layer.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let arch = Architecture { widths: widths.to_vec(), block_ends: (1..=layers).collect() };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("architecture.widths", "need at least input and output widths"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("architecture.widths", "widths must be positive"));
        }
        if self.num_classes() < 2 {
            return Err(Error::config("architecture.widths", "need at least two classes"));
        }
        let layers = self.num_layers();
        let ok = !self.block_ends.is_empty()
            && self.block_ends.windows(2).all(|w| w[0] < w[1])
            && self.block_ends[0] >= 1
            && *self.block_ends.last().unwrap() == layers;
        if !ok {
            return Err(Error::config(
                "architecture.block_ends",
                format!("must be strictly increasing and end at the layer count {layers}"),
            ));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_blocks(&self) -> usize {
        self.block_ends.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Width of the feature emitted by block `k` (1-based).
    pub fn block_width(&self, k: usize) -> usize {
        self.widths[self.block_ends[k - 1]]
    }

    /// Number of scalar parameters `d` (weights and biases) per moment.
    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Stable content hash, used to tie checkpoints to architectures.
    pub fn hash(&self) -> String {
        crate::harness::hash_json(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer {
    /// `in x out`
    pub mu_w: Tensor,
    pub rho_w: Tensor,
    /// `1 x out`
    pub mu_b: Tensor,
    pub rho_b: Tensor,
}

impl VariationalLayer {
    /// He-scaled random means, zero bias means and constant `rho`.
    pub fn init(in_dim: usize, out_dim: usize, init_rho: f64, rng: &mut Rng) -> Self {
        let scale = (2.0 / in_dim as f64).sqrt();
        let mu_w = (0..in_dim * out_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        VariationalLayer {
            mu_w: Tensor::new(vec![in_dim, out_dim], mu_w).expect("layer shape"),
            rho_w: Tensor::full(&[in_dim, out_dim], init_rho),
            mu_b: Tensor::zeros(&[1, out_dim]),
            rho_b: Tensor::full(&[1, out_dim], init_rho),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.mu_w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.mu_w.shape()[1]
    }

    pub fn sigma_w(&self) -> Tensor {
        sigma_from_rho(&self.rho_w)
    }

    pub fn sigma_b(&self) -> Tensor {
        sigma_from_rho(&self.rho_b)
    }

    fn check(&self) -> Result<()> {
        let (i, o) = (self.in_dim(), self.out_dim());
        let ok = self.rho_w.shape() == [i, o] && self.mu_b.shape() == [1, o] && self.rho_b.shape() == [1, o];
        if ok { Ok(()) } else { Err(Error::shape("VariationalLayer", "mu/rho shapes disagree")) }
    }
}

/// Multiplicative noise for one layer sample: `w = mu + sigma * w_noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise {
    pub w: Tensor,
    pub b: Tensor,
}

impl LayerNoise {
    pub fn zeros(layer: &VariationalLayer) -> Self {
        LayerNoise { w: Tensor::zeros(layer.mu_w.shape()), b: Tensor::zeros(layer.mu_b.shape()) }
    }
}

/// One concrete draw of a layer's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledWeights {
    pub w: Tensor,
    pub b: Tensor,
}

pub fn sigma_from_rho(rho: &Tensor) -> Tensor {
    rho.map(tensor::softplus)
}

fn gaussian_like(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

/// A unit-norm direction `eps / |eps|` over the whole tensor and a radius `|N(0, 1)|`.
pub fn radial_parts(shape: &[usize], rng: &mut Rng) -> (Tensor, f64) {
    loop {
        let eps = gaussian_like(shape, rng);
        let norm = eps.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        // Only reachable with a pathological stream; redraw.
        if norm < 1e-300 {
            continue;
        }
        let r: f64 = StandardNormal.sample(rng);
        return (eps.map(|x| x / norm), r.abs());
    }
}

/// Unit direction scaled by a half-normal radius, drawn over the whole tensor.
pub fn radial_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    let (dir, r) = radial_parts(shape, rng);
    dir.map(|x| x * r)
}

pub fn draw_noise(layer: &VariationalLayer, mode: SamplingMode, rng: &mut Rng) -> LayerNoise {
    match mode {
        SamplingMode::Bbb => LayerNoise {
            w: gaussian_like(layer.mu_w.shape(), rng),
            b: gaussian_like(layer.mu_b.shape(), rng),
        },
        SamplingMode::Radial => LayerNoise {
            w: radial_noise(layer.mu_w.shape(), rng),
            b: radial_noise(layer.mu_b.shape(), rng),
        },
    }
}

fn apply_noise(mu: &Tensor, rho: &Tensor, noise: &Tensor) -> Tensor {
    let data = mu
        .data()
        .iter()
        .zip(rho.data())
        .zip(noise.data())
        .map(|((m, r), e)| m + tensor::softplus(*r) * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data).expect("shape")
}

/// `w = mu + sigma * eps`, `eps ~ N(0, I)`.
pub fn sample_bbb(layer: &VariationalLayer, rng: &mut Rng) -> SampledWeights {
    let noise = draw_noise(layer, SamplingMode::Bbb, rng);
    SampledWeights {
        w: apply_noise(&layer.mu_w, &layer.rho_w, &noise.w),
        b: apply_noise(&layer.mu_b, &layer.rho_b, &noise.b),
    }
}

/// `w = mu + sigma * eps / |eps| * r`, `r = |N(0, 1)|`, one radius per tensor.
pub fn sample_radial(layer: &VariationalLayer, rng: &mut Rng) -> SampledWeights {
    let noise = draw_noise(layer, SamplingMode::Radial, rng);
    SampledWeights {
        w: apply_noise(&layer.mu_w, &layer.rho_w, &noise.w),
        b: apply_noise(&layer.mu_b, &layer.rho_b, &noise.b),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnnModel {
    pub arch: Architecture,
    pub layers: Vec<VariationalLayer>,
    pub mode: SamplingMode,
    pub prior: PriorSpec,
}

/// Graph handles for one layer's variational parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub mu_w: Var,
    pub rho_w: Var,
    pub mu_b: Var,
    pub rho_b: Var,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub layers: Vec<LayerVars>,
}

impl ModelVars {
    /// Every handle in flatten order (`mu_w, rho_w, mu_b, rho_b` per layer).
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.mu_w, l.rho_w, l.mu_b, l.rho_b]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `n x classes`
    pub logits: Var,
    /// Feature of each block, `n x width_k`; the last one is the logits.
    pub features: Vec<Var>,
}

/// Components of the per-network variational loss.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub loss: Var,
    pub kl: Var,
    pub nll: Var,
    pub forward: ForwardOutput,
}

impl BnnModel {
    pub fn new(arch: Architecture, mode: SamplingMode, prior: PriorSpec, rng: &mut Rng) -> Result<Self> {
        Self::with_init_rho(arch, mode, prior, DEFAULT_INIT_RHO, rng)
    }

    pub fn with_init_rho(
        arch: Architecture,
        mode: SamplingMode,
        prior: PriorSpec,
        init_rho: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        arch.validate()?;
        let layers = arch.widths.windows(2).map(|w| VariationalLayer::init(w[0], w[1], init_rho, rng)).collect();
        Ok(BnnModel { arch, layers, mode, prior })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.num_layers() {
            return Err(Error::shape("BnnModel", "layer count disagrees with architecture"));
        }
        for (l, w) in self.layers.iter().zip(self.arch.widths.windows(2)) {
            l.check()?;
            if l.in_dim() != w[0] || l.out_dim() != w[1] {
                return Err(Error::shape("BnnModel", "layer dims disagree with architecture"));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    /// One noise draw for every layer, in layer order.
    pub fn sample_noise(&self, rng: &mut Rng) -> Vec<LayerNoise> {
        self.layers.iter().map(|l| draw_noise(l, self.mode, rng)).collect()
    }

    /// All-zero noise: the forward pass then uses the posterior means.
    pub fn mean_noise(&self) -> Vec<LayerNoise> {
        self.layers.iter().map(LayerNoise::zeros).collect()
    }

    /// Adds the parameters to `g`, as leaves when `trainable`, else as constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<ModelVars> {
        let mut add = |t: &Tensor| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerVars { mu_w: add(&l.mu_w)?, rho_w: add(&l.rho_w)?, mu_b: add(&l.mu_b)?, rho_b: add(&l.rho_b)? })
            })
            .collect::<Result<_>>()?;
        Ok(ModelVars { layers })
    }

    /// Flat `(mu, rho)` vectors, layer by layer, weights before biases.
    pub fn flatten(&self) -> (Vec<f64>, Vec<f64>) {
        let mut mu = Vec::with_capacity(self.num_params());
        let mut rho = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            mu.extend_from_slice(l.mu_w.data());
            mu.extend_from_slice(l.mu_b.data());
            rho.extend_from_slice(l.rho_w.data());
            rho.extend_from_slice(l.rho_b.data());
        }
        (mu, rho)
    }

    pub fn unflatten(&mut self, mu: &[f64], rho: &[f64]) -> Result<()> {
        if mu.len() != self.num_params() || rho.len() != self.num_params() {
            return Err(Error::shape(
                "unflatten",
                format!("expected {} values, got mu={} rho={}", self.num_params(), mu.len(), rho.len()),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for (m, r) in [(&mut l.mu_w, &mut l.rho_w), (&mut l.mu_b, &mut l.rho_b)] {
                let n = m.numel();
                m.data_mut().copy_from_slice(&mu[off..off + n]);
                r.data_mut().copy_from_slice(&rho[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// The flattened posterior `N(mu, diag(softplus(rho)^2))`.
    pub fn posterior(&self) -> DiagonalGaussian {
        let (mu, rho) = self.flatten();
        DiagonalGaussian::new(mu, rho.into_iter().map(tensor::softplus).collect())
            .expect("softplus is positive")
    }

    /// Closed-form `KL[q || N(0, s^2 I)]` as a plain number.
    pub fn kl_to_prior_value(&self) -> f64 {
        let s = self.prior.std;
        let (mu, rho) = self.flatten();
        mu.iter()
            .zip(&rho)
            .map(|(m, r)| {
                let sigma = tensor::softplus(*r);
                (s / sigma).ln() + (sigma * sigma + m * m) / (2.0 * s * s) - 0.5
            })
            .sum()
    }
}

/// `sigma = softplus(rho)` on the graph.
pub fn sigma_var(g: &mut Graph, rho: Var) -> Result<Var> {
    g.softplus(rho)
}

fn sampled_param(g: &mut Graph, mu: Var, rho: Var, noise: &Tensor) -> Result<Var> {
    let sigma = g.softplus(rho)?;
    let eps = g.constant(noise.clone())?;
    let scaled = g.mul(sigma, eps)?;
    g.add(mu, scaled)
}

/// Runs the network on `x` (`n x input`) with one weight sample given by `noise`.
pub fn forward(
    g: &mut Graph,
    model: &BnnModel,
    vars: &ModelVars,
    x: Var,
    noise: &[LayerNoise],
) -> Result<ForwardOutput> {
    let (n, d) = g.value(x).dims2()?;
    if d != model.arch.input_dim() {
        return Err(Error::shape("forward", format!("input has {d} features, model expects {}", model.arch.input_dim())));
    }
    if noise.len() != model.layers.len() || vars.layers.len() != model.layers.len() {
        return Err(Error::shape("forward", "noise/vars do not match the layer count"));
    }
    let last = model.layers.len() - 1;
    let mut h = x;
    let mut features = Vec::with_capacity(model.arch.num_blocks());
    let mut block = 0;
    for (i, (lv, nz)) in vars.layers.iter().zip(noise).enumerate() {
        let w = sampled_param(g, lv.mu_w, lv.rho_w, &nz.w)?;
        let b = sampled_param(g, lv.mu_b, lv.rho_b, &nz.b)?;
        let xw = g.matmul(h, w)?;
        let bb = g.broadcast_rows(b, n)?;
        h = g.add(xw, bb)?;
        if i != last {
            h = g.relu(h)?;
        }
        if model.arch.block_ends[block] == i + 1 {
            features.push(h);
            block += 1;
        }
    }
    Ok(ForwardOutput { logits: h, features })
}

/// Sum over all parameters of `log(s/sigma) + (sigma^2 + mu^2)/(2 s^2) - 1/2`.
pub fn kl_to_prior(g: &mut Graph, vars: &ModelVars, prior: PriorSpec) -> Result<Var> {
    let s = prior.std;
    let mut terms = Vec::with_capacity(vars.layers.len() * 2);
    for lv in &vars.layers {
        for (mu, rho) in [(lv.mu_w, lv.rho_w), (lv.mu_b, lv.rho_b)] {
            let sigma = g.softplus(rho)?;
            let log_sigma = g.log(sigma)?;
            let sig2 = g.mul(sigma, sigma)?;
            let mu2 = g.mul(mu, mu)?;
            let quad = g.add(sig2, mu2)?;
            let quad = g.scale(quad, 1.0 / (2.0 * s * s))?;
            let t = g.sub(quad, log_sigma)?;
            let t = g.add_scalar(t, s.ln() - 0.5)?;
            terms.push(g.sum(t)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// One-hot `n x classes` matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = g.value(logits).dims2()?;
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{n} logits rows vs {} labels", labels.len())));
    }
    let onehot = g.constant(one_hot(labels, c)?)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(onehot, logp)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / n as f64)
}

/// `KL[q || p] / N + mean cross-entropy` of one sampled network on the batch.
pub fn elbo_loss(
    g: &mut Graph,
    model: &BnnModel,
    vars: &ModelVars,
    x: Var,
    labels: &[usize],
    noise: &[LayerNoise],
    dataset_size: usize,
) -> Result<ElboTerms> {
    if dataset_size == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    let forward = forward(g, model, vars, x, noise)?;
    let nll = cross_entropy(g, forward.logits, labels)?;
    let kl = kl_to_prior(g, vars, model.prior)?;
    let kl_scaled = g.scale(kl, 1.0 / dataset_size as f64)?;
    let loss = g.add(kl_scaled, nll)?;
    Ok(ElboTerms { loss, kl, nll, forward })
}

/// Evaluates the network without recording gradients; returns `(logits, features)`.
pub fn forward_values(model: &BnnModel, x: &Tensor, noise: &[LayerNoise]) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let out = forward(&mut g, model, &vars, xv, noise)?;
    let feats = out.features.iter().map(|&f| g.value(f).clone()).collect();
    Ok((g.value(out.logits).clone(), feats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small_model(mode: SamplingMode) -> BnnModel {
        let arch = Architecture::mlp(&[3, 5, 4, 2]).unwrap();
        BnnModel::new(arch, mode, PriorSpec::default(), &mut rng::stream(1, 0)).unwrap()
    }

    #[test]
    fn sigma_from_rho_values() {
        let s = sigma_from_rho(&Tensor::vector(vec![0.0, -20.0, 5.0]));
        assert!((s.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(s.data()[1] > 0.0 && (s.data()[1] - (-20.0f64).exp()).abs() < 1e-17);
        assert!((s.data()[2] - 5.006_715_348_489_118).abs() < 1e-12);
        assert!((tensor::softplus(DEFAULT_INIT_RHO) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn degenerate_posterior_sample_is_the_mean() {
        let mut layer = VariationalLayer::init(3, 2, -800.0, &mut rng::stream(3, 0));
        layer.mu_b = Tensor::new(vec![1, 2], vec![0.25, -1.0]).unwrap();
        for s in [sample_bbb(&layer, &mut rng::stream(4, 0)), sample_radial(&layer, &mut rng::stream(4, 0))] {
            assert_eq!(s.w, layer.mu_w);
            assert_eq!(s.b, layer.mu_b);
        }
    }

    #[test]
    fn sampling_replays_under_a_fixed_seed() {
        let layer = VariationalLayer::init(4, 3, 0.0, &mut rng::stream(3, 0));
        assert_eq!(sample_bbb(&layer, &mut rng::stream(9, 1)), sample_bbb(&layer, &mut rng::stream(9, 1)));
        assert_eq!(sample_radial(&layer, &mut rng::stream(9, 1)), sample_radial(&layer, &mut rng::stream(9, 1)));
    }

    #[test]
    fn radial_direction_has_unit_norm() {
        let mut r = rng::stream(11, 0);
        for _ in 0..100 {
            let (dir, radius) = radial_parts(&[7, 3], &mut r);
            let norm = dir.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(radius >= 0.0);
        }
    }

    #[test]
    fn linear_model_with_zero_means_outputs_bias() {
        let arch = Architecture::mlp(&[3, 2]).unwrap();
        let mut m = BnnModel::with_init_rho(arch, SamplingMode::Bbb, PriorSpec::default(), -800.0, &mut rng::stream(0, 0)).unwrap();
        m.layers[0].mu_w = Tensor::zeros(&[3, 2]);
        m.layers[0].mu_b = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]]).unwrap();
        let noise = m.sample_noise(&mut rng::stream(2, 0));
        let (z, feats) = forward_values(&m, &x, &noise).unwrap();
        assert_eq!(z.data(), &[0.5, -0.5, 0.5, -0.5]);
        assert_eq!(feats.len(), 1);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = small_model(SamplingMode::Bbb);
        let x = Tensor::new(vec![6, 3], (0..18).map(|i| i as f64 * 0.1).collect()).unwrap();
        let noise = m.sample_noise(&mut rng::stream(5, 0));
        let (z, f) = forward_values(&m, &x, &noise).unwrap();
        assert_eq!(z.shape(), &[6, 2]);
        assert_eq!(f.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>(), vec![vec![6, 5], vec![6, 4], vec![6, 2]]);
        let noise2 = m.sample_noise(&mut rng::stream(5, 0));
        assert_eq!(forward_values(&m, &x, &noise2).unwrap(), (z, f));
        let bad = Tensor::zeros(&[2, 4]);
        assert!(forward_values(&m, &bad, &noise).is_err());
    }

    #[test]
    fn kl_is_zero_at_prior_and_matches_graph() {
        let mut m = small_model(SamplingMode::Bbb);
        let s = m.prior.std;
        let rho = (s.exp_m1()).ln();
        let (mu, _) = m.flatten();
        let d = mu.len();
        m.unflatten(&vec![0.0; d], &vec![rho; d]).unwrap();
        assert!(m.kl_to_prior_value().abs() < 1e-10);

        let m = small_model(SamplingMode::Bbb);
        let mut g = Graph::new();
        let vars = m.register(&mut g, true).unwrap();
        let kl = kl_to_prior(&mut g, &vars, m.prior).unwrap();
        assert!((g.value(kl).item() - m.kl_to_prior_value()).abs() < 1e-8);
        assert!(g.value(kl).item() >= 0.0);
    }

    #[test]
    fn single_weight_kl_against_unit_prior() {
        // q = N(1, 1), p = N(0, 1): KL = 0.5.
        let arch = Architecture::mlp(&[1, 2]).unwrap();
        let mut m = BnnModel::new(arch, SamplingMode::Bbb, PriorSpec::new(1.0).unwrap(), &mut rng::stream(0, 0)).unwrap();
        let rho1 = (1.0f64.exp_m1()).ln();
        m.unflatten(&[1.0, 0.0, 0.0, 0.0], &[rho1; 4]).unwrap();
        assert!((m.kl_to_prior_value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn elbo_with_uniform_logits_is_log_c() {
        let arch = Architecture::mlp(&[2, 3]).unwrap();
        let s = 0.1;
        let mut m = BnnModel::new(arch, SamplingMode::Bbb, PriorSpec::new(s).unwrap(), &mut rng::stream(0, 0)).unwrap();
        let d = m.num_params();
        // Means at the prior mean, sigma equal to the prior std: KL vanishes and with
        // zero noise every logit is zero.
        m.unflatten(&vec![0.0; d], &vec![s.exp_m1().ln(); d]).unwrap();
        let mut g = Graph::new();
        let vars = m.register(&mut g, true).unwrap();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap()).unwrap();
        let t = elbo_loss(&mut g, &m, &vars, x, &[0, 2], &m.mean_noise(), 100).unwrap();
        assert!((g.value(t.loss).item() - 3f64.ln()).abs() < 1e-10);
        assert!(elbo_loss(&mut g, &m, &vars, x, &[0, 3], &m.mean_noise(), 100).is_err());
    }

    #[test]
    fn flatten_unflatten_identity() {
        let m = small_model(SamplingMode::Radial);
        let (mu, rho) = m.flatten();
        assert_eq!(mu.len(), m.num_params());
        let mut m2 = small_model(SamplingMode::Radial);
        m2.unflatten(&mu.iter().map(|x| x + 1.0).collect::<Vec<_>>(), &rho).unwrap();
        m2.unflatten(&mu, &rho).unwrap();
        assert_eq!(m, m2);
        assert!(m2.unflatten(&mu[1..], &rho).is_err());
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::mlp(&[2]).is_err());
        assert!(Architecture::mlp(&[2, 1]).is_err());
        let bad = Architecture { widths: vec![2, 4, 2], block_ends: vec![2, 1] };
        assert!(bad.validate().is_err());
        let ok = Architecture { widths: vec![2, 4, 4, 2], block_ends: vec![1, 3] };
        assert!(ok.validate().is_ok());
        assert_eq!(ok.block_width(2), 2);
        assert_eq!(ok.num_params(), 2 * 4 + 4 + 4 * 4 + 4 + 4 * 2 + 2);
    }
}
