//! Two-peer mutual training.
//!
//! Each iteration draws one weight sample per network, computes the shared
//! parameter-diversity term once, then updates B1 on its own loss and B2 on its
//! own loss, in that order. A network's loss treats everything coming from its
//! peer (soft predictions, fused features, posterior moments) as constants. B2
//! sees B1's outputs after B1's update, re-evaluated with the same noise draw.

mod adam;
mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use schedule::{argmax, mean_accuracy, run_training, EpochRecord, Schedule, TrainingRun};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::features::{self, AttentionParams, FeatureBlock, FusionConfig};
use crate::geometry::{self, DiagonalGaussian, GaussianVars, ParamMetric};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use crate::variational::{self, Architecture, BnnModel, LayerNoise, ModelVars, PriorSpec, SamplingMode};

/// Training regime being compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Each network alone on its variational loss.
    Vanilla,
    /// Logit distillation only.
    Dml,
    /// Logit distillation plus parameter and feature diversity.
    Ours,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Dml => "dml",
            Method::Ours => "ours",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub metric: ParamMetric,
    /// Global gradient-norm clip per network update; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::small_dataset()
    }
}

impl Hyperparams {
    /// `T = 3, alpha = 1, beta = 2`.
    pub fn small_dataset() -> Self {
        Hyperparams {
            temperature: 3.0,
            alpha: 1.0,
            beta: 2.0,
            metric: ParamMetric::W2,
            clip_norm: None,
            fusion: FusionConfig::default(),
            adam: AdamConfig::default(),
        }
    }

    /// `T = alpha = beta = 1`.
    pub fn large_scale() -> Self {
        Hyperparams { temperature: 1.0, alpha: 1.0, beta: 1.0, ..Self::small_dataset() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("hyper.temperature", "must be positive"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("hyper.alpha", "must be non-negative"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("hyper.beta", "must be non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("hyper.clip_norm", "must be positive when set"));
            }
        }
        if self.fusion.tokens == 0 || self.fusion.attn_dim == 0 {
            return Err(Error::config("hyper.fusion", "tokens and attn_dim must be positive"));
        }
        Ok(())
    }
}

/// Resolved per-step knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSettings {
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Whether the logit distillation term is active.
    pub mutual: bool,
    pub lr: f64,
    pub metric: ParamMetric,
    pub clip_norm: Option<f64>,
    pub scaled_attention: bool,
}

impl StepSettings {
    /// Settings for `method`; stage 1 forces `beta = 0`.
    pub fn for_method(hyper: &Hyperparams, method: Method, stage: u8, lr: f64) -> Self {
        let (mutual, alpha, beta) = match method {
            Method::Vanilla => (false, 0.0, 0.0),
            Method::Dml => (true, 0.0, 0.0),
            Method::Ours => (true, hyper.alpha, if stage == 1 { 0.0 } else { hyper.beta }),
        };
        StepSettings {
            temperature: hyper.temperature,
            alpha,
            beta,
            mutual,
            lr,
            metric: hyper.metric,
            clip_norm: hyper.clip_norm,
            scaled_attention: hyper.fusion.scaled,
        }
    }
}

/// One network with its attention heads and optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peer {
    pub model: BnnModel,
    pub attn: Vec<AttentionParams>,
    pub opt: AdamState,
}

impl Peer {
    pub fn new(model: BnnModel, attn: Vec<AttentionParams>, adam: AdamConfig) -> Self {
        let mut peer = Peer { model, attn, opt: AdamState::new(adam, std::iter::empty()) };
        peer.opt = AdamState::new(adam, peer.params());
        peer
    }

    /// Every trainable tensor: `mu_w, rho_w, mu_b, rho_b` per layer, then `w_q, w_k, w_v` per fused pair.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for l in &self.model.layers {
            out.extend([&l.mu_w, &l.rho_w, &l.mu_b, &l.rho_b]);
        }
        for a in &self.attn {
            out.extend(a.tensors());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.model.layers {
            out.extend([&mut l.mu_w, &mut l.rho_w, &mut l.mu_b, &mut l.rho_b]);
        }
        for a in &mut self.attn {
            out.extend(a.tensors_mut());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerPair {
    pub b1: Peer,
    pub b2: Peer,
    /// 1-based block pairs fused for feature diversity.
    pub plan: Vec<(usize, usize)>,
}

/// Per-step loss components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub elbo: [f64; 2],
    pub logit_kl: [Option<f64>; 2],
    /// Distance between the two posteriors before either update.
    pub d_param: f64,
    /// The parameter-diversity term as it entered each network's loss.
    pub l_diverse_param: [f64; 2],
    pub feat_kl: [Option<f64>; 2],
    pub loss: [f64; 2],
}

/// Builds B1 from scratch and B2 from scratch or from a deterministic model's weights.
pub fn init_peers(
    arch: &Architecture,
    mode: SamplingMode,
    prior: PriorSpec,
    hyper: &Hyperparams,
    pretrained: Option<&BnnModel>,
    rng: &mut Rng,
) -> Result<PeerPair> {
    arch.validate()?;
    let plan = hyper.fusion.plan(arch.num_blocks())?;
    let block_widths: Vec<usize> = (1..=arch.num_blocks()).map(|k| arch.block_width(k)).collect();
    let m1 = BnnModel::new(arch.clone(), mode, prior, rng)?;
    let a1 = features::init_attention(&block_widths, &hyper.fusion, &plan, rng);
    let mut m2 = BnnModel::new(arch.clone(), mode, prior, rng)?;
    let a2 = features::init_attention(&block_widths, &hyper.fusion, &plan, rng);
    if let Some(src) = pretrained {
        if src.arch != *arch {
            return Err(Error::Checkpoint(format!(
                "pre-trained architecture {} does not match {}",
                src.arch.hash(),
                arch.hash()
            )));
        }
        for (dst, s) in m2.layers.iter_mut().zip(&src.layers) {
            dst.mu_w = s.mu_w.clone();
            dst.mu_b = s.mu_b.clone();
        }
    }
    Ok(PeerPair { b1: Peer::new(m1, a1, hyper.adam), b2: Peer::new(m2, a2, hyper.adam), plan })
}

/// What one network exposes to its peer for a step.
struct PeerView {
    soft: Tensor,
    fused: Vec<Tensor>,
}

fn feature_blocks(model: &BnnModel, features: &[Var], tokens: usize, k: usize) -> FeatureBlock {
    FeatureBlock { index: k, value: features[k - 1], tokens: features::token_count(model.arch.block_width(k), tokens) }
}

/// Fused feature batches for every planned pair.
pub fn fuse_all(
    g: &mut Graph,
    model: &BnnModel,
    attn: &[features::AttentionVars],
    features: &[Var],
    plan: &[(usize, usize)],
    fusion_tokens: usize,
    scaled: bool,
) -> Result<Vec<Var>> {
    plan.iter()
        .zip(attn)
        .map(|(&(k, k1), av)| {
            let lower = feature_blocks(model, features, fusion_tokens, k);
            let upper = feature_blocks(model, features, fusion_tokens, k1);
            features::fuse_cross_attention(g, lower, upper, av, scaled)
        })
        .collect()
}

fn peer_view(peer: &Peer, plan: &[(usize, usize)], x: &Tensor, noise: &[LayerNoise], s: &StepSettings, tokens: usize) -> Result<PeerView> {
    let mut g = Graph::new();
    let vars = peer.model.register(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let out = variational::forward(&mut g, &peer.model, &vars, xv, noise)?;
    let scaled = g.scale(out.logits, 1.0 / s.temperature)?;
    let soft = g.softmax(scaled)?;
    let attn = peer.attn.iter().map(|a| a.register(&mut g, false)).collect::<Result<Vec<_>>>()?;
    let fused = fuse_all(&mut g, &peer.model, &attn, &out.features, plan, tokens, s.scaled_attention)?;
    Ok(PeerView { soft: g.value(soft).clone(), fused: fused.iter().map(|&f| g.value(f).clone()).collect() })
}

/// `mean_n KL[target || softmax(logits / T)]` with `target` held constant.
pub fn soft_target_kl(g: &mut Graph, target: &Tensor, logits: Var, temperature: f64) -> Result<Var> {
    let (n, c) = g.value(logits).dims2()?;
    if target.shape() != [n, c] {
        return Err(Error::shape("logit_loss", format!("peer probabilities {:?} vs logits {n}x{c}", target.shape())));
    }
    let entropy_part: f64 = target.data().iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum();
    let scaled = g.scale(logits, 1.0 / temperature)?;
    let log_q = g.log_softmax(scaled)?;
    let p = g.constant(target.clone())?;
    let cross = g.mul(p, log_q)?;
    let cross = g.sum(cross)?;
    let kl = g.neg(cross)?;
    let kl = g.add_scalar(kl, entropy_part)?;
    g.scale(kl, 1.0 / n as f64)
}

/// Temperature-softened probabilities.
pub fn soft_logits(z: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let (_, c) = z.dims2()?;
    let data = z.data().chunks(c).flat_map(|r| tensor::softmax_row(&r.iter().map(|v| v / temperature).collect::<Vec<_>>())).collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// The flattened posterior of `vars` as `1 x d` rows of means and std-devs.
pub fn posterior_vars(g: &mut Graph, vars: &ModelVars) -> Result<GaussianVars> {
    let mut mus = Vec::new();
    let mut rhos = Vec::new();
    for lv in &vars.layers {
        for (mu, rho) in [(lv.mu_w, lv.rho_w), (lv.mu_b, lv.rho_b)] {
            let n = g.value(mu).numel();
            mus.push(g.reshape(mu, &[1, n])?);
            rhos.push(g.reshape(rho, &[1, n])?);
        }
    }
    let mu = g.concat(&mus, Axis::Cols)?;
    let rho = g.concat(&rhos, Axis::Cols)?;
    let sigma = g.softplus(rho)?;
    Ok(GaussianVars { mu, sigma })
}

fn constant_posterior(g: &mut Graph, q: &DiagonalGaussian) -> Result<GaussianVars> {
    let d = q.dim();
    Ok(GaussianVars {
        mu: g.constant(Tensor::new(vec![1, d], q.mu().to_vec())?)?,
        sigma: g.constant(Tensor::new(vec![1, d], q.sigma().to_vec())?)?,
    })
}

struct HalfStep {
    grads: Vec<Tensor>,
    elbo: f64,
    logit_kl: Option<f64>,
    l_param: f64,
    feat_kl: Option<f64>,
    loss: f64,
}

#[allow(clippy::too_many_arguments)]
fn half_step(
    peer: &Peer,
    plan: &[(usize, usize)],
    batch: &Batch,
    noise: &[LayerNoise],
    view: Option<&PeerView>,
    other: &DiagonalGaussian,
    self_first: bool,
    s: &StepSettings,
    tokens: usize,
    dataset_size: usize,
) -> Result<HalfStep> {
    let mut g = Graph::new();
    let vars = peer.model.register(&mut g, true)?;
    let attn = peer.attn.iter().map(|a| a.register(&mut g, true)).collect::<Result<Vec<_>>>()?;
    let x = g.constant(batch.x.clone())?;
    let elbo = variational::elbo_loss(&mut g, &peer.model, &vars, x, &batch.y, noise, dataset_size)?;
    let mut loss = elbo.loss;

    let mut logit_kl = None;
    if s.mutual {
        let view = view.ok_or_else(|| Error::InvalidArgument("mutual step without a peer view".into()))?;
        let kl = soft_target_kl(&mut g, &view.soft, elbo.forward.logits, s.temperature)?;
        logit_kl = Some(g.value(kl).item());
        let scaled = g.scale(kl, s.temperature * s.temperature)?;
        loss = g.add(loss, scaled)?;
    }

    let own = posterior_vars(&mut g, &vars)?;
    let peer_post = constant_posterior(&mut g, other)?;
    let (q1, q2) = if self_first { (own, peer_post) } else { (peer_post, own) };
    let distance = geometry::posterior_distance_var(&mut g, s.metric, q1, q2)?;
    let l_param = geometry::diverse_param_loss_var(&mut g, distance)?;
    let l_param_value = g.value(l_param).item();
    if s.alpha > 0.0 {
        let term = g.scale(l_param, s.alpha)?;
        loss = g.add(loss, term)?;
    }

    let mut feat_kl = None;
    if let (Some(view), false) = (view, plan.is_empty()) {
        let own_fused = fuse_all(&mut g, &peer.model, &attn, &elbo.forward.features, plan, tokens, s.scaled_attention)?;
        let mut total: Option<Var> = None;
        for (own_g, peer_g) in own_fused.iter().zip(&view.fused) {
            let from = g.constant(peer_g.clone())?;
            let kl = features::feature_kl_var(&mut g, from, *own_g)?;
            total = Some(match total {
                None => kl,
                Some(t) => g.add(t, kl)?,
            });
        }
        if let Some(total) = total {
            feat_kl = Some(g.value(total).item());
            if s.beta > 0.0 {
                let l_feat = features::diverse_feat_loss_var(&mut g, total)?;
                let term = g.scale(l_feat, s.beta)?;
                loss = g.add(loss, term)?;
            }
        }
    }

    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    g.backward(loss)?;
    let mut grads: Vec<Tensor> = vars
        .all()
        .into_iter()
        .chain(attn.iter().flat_map(|a| [a.w_q, a.w_k, a.w_v]))
        .map(|v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();
    if let Some(max_norm) = s.clip_norm {
        clip_global_norm(&mut grads, max_norm);
    }
    Ok(HalfStep {
        grads,
        elbo: g.value(elbo.loss).item(),
        logit_kl,
        l_param: l_param_value,
        feat_kl,
        loss: loss_value,
    })
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads {
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
}

fn apply_update(peer: &Peer, grads: &[Tensor], lr: f64) -> Result<Peer> {
    let mut next = peer.clone();
    let mut opt = std::mem::replace(&mut next.opt, AdamState::new(peer.opt.config, std::iter::empty()));
    opt.update(&mut next.params_mut(), grads, lr)?;
    next.opt = opt;
    if next.params().iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("parameter update".into()));
    }
    Ok(next)
}

/// One iteration: B1 update, then B2 update. On error the pair is left untouched.
pub fn train_step(
    pair: &mut PeerPair,
    batch: &Batch,
    s: &StepSettings,
    tokens: usize,
    dataset_size: usize,
    rng: &mut Rng,
) -> Result<StepMetrics> {
    let noise1 = pair.b1.model.sample_noise(rng);
    let noise2 = pair.b2.model.sample_noise(rng);
    let post1 = pair.b1.model.posterior();
    let post2 = pair.b2.model.posterior();
    let d_param = geometry::posterior_distance(s.metric, &post1, &post2)?;

    let view2 = if s.mutual { Some(peer_view(&pair.b2, &pair.plan, &batch.x, &noise2, s, tokens)?) } else { None };
    let h1 = half_step(&pair.b1, &pair.plan, batch, &noise1, view2.as_ref(), &post2, true, s, tokens, dataset_size)?;
    let b1 = apply_update(&pair.b1, &h1.grads, s.lr)?;

    let view1 = if s.mutual { Some(peer_view(&b1, &pair.plan, &batch.x, &noise1, s, tokens)?) } else { None };
    let h2 = half_step(&pair.b2, &pair.plan, batch, &noise2, view1.as_ref(), &post1, false, s, tokens, dataset_size)?;
    let b2 = apply_update(&pair.b2, &h2.grads, s.lr)?;

    pair.b1 = b1;
    pair.b2 = b2;
    Ok(StepMetrics {
        elbo: [h1.elbo, h2.elbo],
        logit_kl: [h1.logit_kl, h2.logit_kl],
        d_param,
        l_diverse_param: [h1.l_param, h2.l_param],
        feat_kl: [h1.feat_kl, h2.feat_kl],
        loss: [h1.loss, h2.loss],
    })
}

/// Trains the posterior means as an ordinary network (no noise, no KL); used to
/// initialise B2. Returns the model and the mean training loss per epoch.
pub fn train_deterministic(
    model: &mut BnnModel,
    train: &crate::data::Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    adam: AdamConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut opt = AdamState::new(adam, model.layers.iter().flat_map(|l| [&l.mu_w, &l.mu_b]));
    let noise = model.mean_noise();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        let batches = train.epoch_batches(batch_size, rng);
        for batch in &batches {
            let mut g = Graph::new();
            let vars = model.register(&mut g, true)?;
            let x = g.constant(batch.x.clone())?;
            let out = variational::forward(&mut g, model, &vars, x, &noise)?;
            let loss = variational::cross_entropy(&mut g, out.logits, &batch.y)?;
            total += g.value(loss).item();
            g.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .layers
                .iter()
                .flat_map(|lv| [lv.mu_w, lv.mu_b])
                .map(|v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
                .collect();
            let mut params: Vec<&mut Tensor> = model.layers.iter_mut().flat_map(|l| [&mut l.mu_w, &mut l.mu_b]).collect();
            opt.update(&mut params, &grads, lr)?;
        }
        losses.push(total / batches.len() as f64);
    }
    Ok(losses)
}
