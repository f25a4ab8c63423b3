//! Cross-attention fusion of block features and the feature-distribution
//! diversity loss.
//!
//! Dense block outputs are split into `tokens` equal chunks per sample. For a
//! pair of blocks `(k, k+1)` the queries come from block `k+1` and the keys and
//! values from block `k`; attention is restricted to tokens of the same sample,
//! and the fused tokens are mean-pooled to one vector per sample. A batch of
//! fused vectors defines conditional probabilities `p(i|j)` through a cosine
//! kernel, normalised over `i != j` for each column `j`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Guard added to kernel norms and inside the KL logarithms.
pub const EPS: f64 = 1e-8;

/// Added to attention scores across samples; `exp` of it underflows to exactly 0.
const MASKED_SCORE: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Tokens per dense block (`m`). Blocks whose width is not divisible use the
    /// largest divisor not above `m`.
    pub tokens: usize,
    /// Shared query/key/value dimension `d_a`.
    pub attn_dim: usize,
    /// Divide scores by `sqrt(d_a)` before the softmax.
    pub scaled: bool,
    /// 1-based block pairs `(k, k+1)` to fuse. Empty means the default plan.
    #[serde(default)]
    pub pairs: Vec<(usize, usize)>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { tokens: 4, attn_dim: 16, scaled: true, pairs: Vec::new() }
    }
}

impl FusionConfig {
    /// Pairs actually fused for a network with `blocks` blocks.
    pub fn plan(&self, blocks: usize) -> Result<Vec<(usize, usize)>> {
        let pairs = if !self.pairs.is_empty() {
            self.pairs.clone()
        } else if blocks >= 3 {
            (2..blocks).map(|k| (k, k + 1)).collect()
        } else if blocks == 2 {
            vec![(1, 2)]
        } else {
            vec![]
        };
        for &(a, b) in &pairs {
            if a == 0 || b != a + 1 || b > blocks {
                return Err(Error::config("fusion.pairs", format!("({a}, {b}) is not an adjacent pair of 1..={blocks}")));
            }
        }
        Ok(pairs)
    }
}

/// Largest divisor of `width` that does not exceed `max_tokens`.
pub fn token_count(width: usize, max_tokens: usize) -> usize {
    (1..=max_tokens.min(width).max(1)).rev().find(|t| width % t == 0).unwrap_or(1)
}

/// Per-sample intermediate feature at block `index`, as an `n x width` node.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBlock {
    pub index: usize,
    pub value: Var,
    pub tokens: usize,
}

impl FeatureBlock {
    pub fn token_dim(&self, g: &Graph) -> usize {
        g.value(self.value).shape()[1] / self.tokens
    }
}

/// Query, key and value projections for one fused block pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `token_dim(k+1) x d_a`
    pub w_q: Tensor,
    /// `token_dim(k) x d_a`
    pub w_k: Tensor,
    /// `token_dim(k) x d_a`
    pub w_v: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl AttentionParams {
    pub fn init(query_dim: usize, key_dim: usize, attn_dim: usize, rng: &mut Rng) -> Self {
        let mut draw = |rows: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * attn_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect();
            Tensor::new(vec![rows, attn_dim], data).expect("shape")
        };
        let w_q = draw(query_dim);
        let w_k = draw(key_dim);
        let w_v = draw(key_dim);
        AttentionParams { w_q, w_k, w_v }
    }

    pub fn attn_dim(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<AttentionVars> {
        let mut add = |t: &Tensor| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        Ok(AttentionVars { w_q: add(&self.w_q)?, w_k: add(&self.w_k)?, w_v: add(&self.w_v)? })
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }
}

/// One [`AttentionParams`] per fused pair of a network's plan.
pub fn init_attention(
    widths: &[usize],
    cfg: &FusionConfig,
    plan: &[(usize, usize)],
    rng: &mut Rng,
) -> Vec<AttentionParams> {
    plan.iter()
        .map(|&(k, k1)| {
            let (wk, wk1) = (widths[k - 1], widths[k1 - 1]);
            let key_dim = wk / token_count(wk, cfg.tokens);
            let query_dim = wk1 / token_count(wk1, cfg.tokens);
            AttentionParams::init(query_dim, key_dim, cfg.attn_dim, rng)
        })
        .collect()
}

/// Fuses `lower` (block `k`, keys/values) and `upper` (block `k+1`, queries)
/// into an `n x d_a` batch of per-sample vectors.
pub fn fuse_cross_attention(
    g: &mut Graph,
    lower: FeatureBlock,
    upper: FeatureBlock,
    attn: &AttentionVars,
    scaled: bool,
) -> Result<Var> {
    let (n, wk) = g.value(lower.value).dims2()?;
    let (n1, wk1) = g.value(upper.value).dims2()?;
    if n != n1 {
        return Err(Error::shape("fuse_cross_attention", format!("batch sizes {n} and {n1} differ")));
    }
    if n == 0 {
        return Err(Error::shape("fuse_cross_attention", "empty batch"));
    }
    let (mk, mq) = (lower.tokens, upper.tokens);
    if mk == 0 || mq == 0 || wk % mk != 0 || wk1 % mq != 0 {
        return Err(Error::shape("fuse_cross_attention", "block width not divisible by its token count"));
    }
    let keys_in = g.reshape(lower.value, &[n * mk, wk / mk])?;
    let queries_in = g.reshape(upper.value, &[n * mq, wk1 / mq])?;
    let q = g.matmul(queries_in, attn.w_q)?;
    let k = g.matmul(keys_in, attn.w_k)?;
    let v = g.matmul(keys_in, attn.w_v)?;
    let d_a = g.value(q).shape()[1];
    let kt = g.transpose(k)?;
    let mut scores = g.matmul(q, kt)?;
    if scaled {
        scores = g.scale(scores, 1.0 / (d_a as f64).sqrt())?;
    }
    if n > 1 {
        let mut mask = Tensor::full(&[n * mq, n * mk], MASKED_SCORE);
        for s in 0..n {
            for i in s * mq..(s + 1) * mq {
                mask.data_mut()[i * n * mk + s * mk..i * n * mk + (s + 1) * mk].fill(0.0);
            }
        }
        let mask = g.constant(mask)?;
        scores = g.add(scores, mask)?;
    }
    let weights = g.softmax(scores)?;
    let fused_tokens = g.matmul(weights, v)?;
    let mut pool = Tensor::zeros(&[n, n * mq]);
    for s in 0..n {
        pool.data_mut()[s * n * mq + s * mq..s * n * mq + (s + 1) * mq].fill(1.0 / mq as f64);
    }
    let pool = g.constant(pool)?;
    g.matmul(pool, fused_tokens)
}

/// `K(a, b) = (a.b / ((|a| + eps)(|b| + eps)) + 1) / 2`.
pub fn similarity_kernel(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    0.5 * (dot / ((na + EPS) * (nb + EPS)) + 1.0)
}

/// `n x n` matrix with `P[i][j] = p(i|j)`; zero diagonal, columns sum to one.
pub fn conditional_probabilities_var(g: &mut Graph, fused: Var) -> Result<Var> {
    let (n, _) = g.value(fused).dims2()?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("conditional probabilities need n >= 2, got {n}")));
    }
    let norms = g.row_norm(fused)?;
    let norms = g.add_scalar(norms, EPS)?;
    let norms_t = g.transpose(norms)?;
    let denom = g.matmul(norms, norms_t)?;
    let fused_t = g.transpose(fused)?;
    let dots = g.matmul(fused, fused_t)?;
    let cos = g.div(dots, denom)?;
    let kernel = g.scale(cos, 0.5)?;
    let kernel = g.add_scalar(kernel, 0.5)?;
    let mut off_diag = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        off_diag.data_mut()[i * n + i] = 0.0;
    }
    let off_diag = g.constant(off_diag)?;
    let kernel = g.mul(kernel, off_diag)?;
    let col_sums = g.sum_cols(kernel)?;
    let col_sums = g.broadcast_rows(col_sums, n)?;
    g.div(kernel, col_sums)
}

/// `(1/n) sum_j sum_{i != j} P log((P + eps) / (Q + eps))`.
pub fn distribution_kl_var(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (n, n2) = g.value(p).dims2()?;
    if g.value(q).shape() != [n, n2] || n != n2 {
        return Err(Error::shape("feature_kl", format!("{:?} vs {:?}", g.value(p).shape(), g.value(q).shape())));
    }
    let pe = g.add_scalar(p, EPS)?;
    let qe = g.add_scalar(q, EPS)?;
    let lp = g.log(pe)?;
    let lq = g.log(qe)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms)?;
    g.scale(total, 1.0 / n as f64)
}

/// `KL[P || Q]` with `P` built from `from` and `Q` from `to`.
pub fn feature_kl_var(g: &mut Graph, from: Var, to: Var) -> Result<Var> {
    let nf = g.value(from).shape()[0];
    let nt = g.value(to).shape()[0];
    if nf != nt {
        return Err(Error::shape("feature_kl", format!("batch sizes {nf} and {nt} differ")));
    }
    let p = conditional_probabilities_var(g, from)?;
    let q = conditional_probabilities_var(g, to)?;
    distribution_kl_var(g, p, q)
}

/// `log(1 + exp(-D_KL))`.
pub fn diverse_feat_loss_var(g: &mut Graph, kl: Var) -> Result<Var> {
    let neg = g.neg(kl)?;
    g.softplus(neg)
}

pub fn diverse_feat_loss(kl: f64) -> f64 {
    crate::tensor::softplus(-kl)
}

/// Batch of fused per-sample vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedBatch(pub Tensor);

/// Conditional probability matrix of a fused batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDistribution(pub Tensor);

impl FeatureDistribution {
    pub fn from_fused(batch: &FusedBatch) -> Result<Self> {
        let mut g = Graph::new();
        let v = g.constant(batch.0.clone())?;
        let p = conditional_probabilities_var(&mut g, v)?;
        Ok(FeatureDistribution(g.value(p).clone()))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get2(i, j)
    }
}

/// Plain-value [`feature_kl_var`].
pub fn feature_kl(from: &FusedBatch, to: &FusedBatch) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(from.0.clone())?;
    let b = g.constant(to.0.clone())?;
    let d = feature_kl_var(&mut g, a, b)?;
    Ok(g.value(d).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn token_counts() {
        assert_eq!(token_count(64, 4), 4);
        assert_eq!(token_count(2, 4), 2);
        assert_eq!(token_count(3, 4), 3);
        assert_eq!(token_count(6, 4), 3);
        assert_eq!(token_count(7, 4), 1);
    }

    #[test]
    fn default_plans() {
        let cfg = FusionConfig::default();
        assert_eq!(cfg.plan(3).unwrap(), vec![(2, 3)]);
        assert_eq!(cfg.plan(4).unwrap(), vec![(2, 3), (3, 4)]);
        assert_eq!(cfg.plan(2).unwrap(), vec![(1, 2)]);
        assert!(cfg.plan(1).unwrap().is_empty());
        let bad = FusionConfig { pairs: vec![(1, 3)], ..FusionConfig::default() };
        assert!(bad.plan(3).is_err());
    }

    #[test]
    fn kernel_extremes() {
        assert!((similarity_kernel(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-7);
        assert_eq!(similarity_kernel(&[1.0, 0.0], &[0.0, 3.0]), 0.5);
        assert!(similarity_kernel(&[1.0, -2.0], &[-1.0, 2.0]).abs() < 1e-7);
        assert_eq!(similarity_kernel(&[0.0, 0.0], &[0.0, 0.0]), 0.5);
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let mut g = Graph::new();
        let fk = g.constant(rows(&[&[1.0, 2.0], &[3.0, -1.0]])).unwrap();
        let fk1 = g.constant(rows(&[&[0.5], &[-0.5]])).unwrap();
        let mut r = rng::stream(0, 0);
        let p = AttentionParams::init(1, 2, 3, &mut r);
        let av = p.register(&mut g, false).unwrap();
        let out = fuse_cross_attention(
            &mut g,
            FeatureBlock { index: 1, value: fk, tokens: 1 },
            FeatureBlock { index: 2, value: fk1, tokens: 1 },
            &av,
            true,
        )
        .unwrap();
        let want = crate::tensor::matmul_raw(&[1.0, 2.0, 3.0, -1.0], p.w_v.data(), 2, 2, 3);
        assert_eq!(g.value(out).shape(), &[2, 3]);
        for (a, b) in g.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_sample_distribution_is_trivial() {
        let p = FeatureDistribution::from_fused(&FusedBatch(rows(&[&[1.0, 0.2], &[-0.3, 0.9]]))).unwrap();
        assert_eq!(p.get(1, 0), 1.0);
        assert_eq!(p.get(0, 1), 1.0);
        assert_eq!(p.get(0, 0), 0.0);
    }

    #[test]
    fn identical_vectors_give_uniform_columns() {
        let p = FeatureDistribution::from_fused(&FusedBatch(rows(&[&[1.0, 2.0][..]; 4]))).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((p.get(i, j) - want).abs() < 1e-15);
            }
        }
        assert!(FeatureDistribution::from_fused(&FusedBatch(rows(&[&[1.0, 2.0]]))).is_err());
    }

    #[test]
    fn kl_of_identical_batches_is_zero() {
        let b = FusedBatch(rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]));
        assert!(feature_kl(&b, &b).unwrap().abs() < 1e-12);
        let c = FusedBatch(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!(feature_kl(&b, &c).is_err());
    }

    #[test]
    fn diverse_feat_loss_values() {
        assert!((diverse_feat_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((diverse_feat_loss(1.0) - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert!(diverse_feat_loss(0.5) > diverse_feat_loss(0.6));
    }
}
