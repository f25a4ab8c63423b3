//! The experiment commands. Every function here is deterministic given its
//! config and seed; files are only written by the `cmd_*` entry points.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use super::checkpoint::{Checkpoint, CheckpointKind, RngState};
use super::config::TrainConfig;
use super::report::{self, HistoryRow, RunReport, RunResult};
use crate::autodiff::{self, Graph, Var};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::features;
use crate::geometry::{self, GaussianVars, ParamMetric};
use crate::metrics::{self, MetricsReport};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::trainer::{self, Method, PeerPair};
use crate::variational::{self, Architecture, BnnModel, LayerNoise, LayerVars, ModelVars, PriorSpec, SamplingMode};

// rng stream ids per seed
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const PRETRAIN_STREAM: u64 = 3;

/// Everything one `(seed, method)` training run produces.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub result: RunResult,
    pub history: Vec<HistoryRow>,
    pub pair: PeerPair,
    pub rng: RngState,
}

/// Train / evaluation split for `seed`.
pub fn dataset_for(cfg: &TrainConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = data::make_dataset(&cfg.dataset, seed, cfg.validation_fraction)?;
    if train.features() != cfg.architecture.input_dim() {
        return Err(Error::config(
            "architecture.widths",
            format!("input width {} does not match the dataset's {} features", cfg.architecture.input_dim(), train.features()),
        ));
    }
    if let Some(&y) = train.y.iter().chain(&val.y).find(|&&y| y >= cfg.architecture.num_classes()) {
        return Err(Error::config("architecture.widths", format!("label {y} exceeds the output width")));
    }
    Ok((train, val))
}

fn load_pretrained(cfg: &TrainConfig) -> Result<Option<BnnModel>> {
    cfg.pretrained
        .as_deref()
        .map(|p| Checkpoint::load(p, Some(&cfg.architecture)).map(|c| c.model))
        .transpose()
}

/// Ensemble metrics of one network on `data`.
pub fn evaluate_model(model: &BnnModel, data: &Dataset, cfg: &TrainConfig, eval_seed: u64) -> Result<MetricsReport> {
    let pred = metrics::ensemble_predict(model, &data.x, cfg.eval.samples, eval_seed, Execution::Sequential)?;
    metrics::evaluate(&pred, &data.y, &cfg.eval.fractions, cfg.eval.bins, eval_seed)
}

/// Trains one peer pair with `method` and evaluates both networks.
pub fn run_seed(cfg: &TrainConfig, method: Method, seed: u64, pretrained: Option<&BnnModel>) -> Result<SeedRun> {
    let hash = cfg.hash();
    let (train, val) = dataset_for(cfg, seed)?;
    let mut pair = trainer::init_peers(
        &cfg.architecture,
        cfg.sampling,
        cfg.prior,
        &cfg.hyper,
        pretrained,
        &mut rng::stream(seed, INIT_STREAM),
    )?;
    let mut rng = rng::stream(seed, TRAIN_STREAM);
    let run = trainer::run_training(&mut pair, &train, &val, &cfg.hyper, &cfg.schedule, method, &mut rng)?;
    let history: Vec<HistoryRow> = run.history.iter().map(|r| HistoryRow::new(seed, &hash, r)).collect();
    let eval_data = if val.is_empty() { &train } else { &val };
    let eval_seed = rng::derive_seed(cfg.eval.seed, seed);
    let (b1, b2, final_w2) = if run.failure.is_none() {
        (
            Some(evaluate_model(&pair.b1.model, eval_data, cfg, eval_seed)?),
            Some(evaluate_model(&pair.b2.model, eval_data, cfg, eval_seed)?),
            Some(geometry::w2_squared(&pair.b1.model.posterior(), &pair.b2.model.posterior())?),
        )
    } else {
        (None, None, None)
    };
    let result = RunResult {
        seed,
        method,
        config_hash: hash,
        status: if run.failure.is_some() { "FAILED".into() } else { "ok".into() },
        failure: run.failure,
        last_good_epoch: run.history.last().map(|r| r.epoch),
        b1,
        b2,
        final_w2,
    };
    Ok(SeedRun { result, history, pair, rng: RngState::capture(&rng) })
}

fn save_pair(run: &SeedRun, dir: &Path, prefix: &str) -> Result<()> {
    for (role, peer) in [("b1", &run.pair.b1), ("b2", &run.pair.b2)] {
        let mut ck = Checkpoint::from_peer(peer);
        ck.role = Some(role.into());
        ck.seed = Some(run.result.seed);
        ck.config_hash = Some(run.result.config_hash.clone());
        ck.rng = Some(run.rng.clone());
        ck.save(&dir.join(format!("{prefix}{role}.ckpt")))?;
    }
    Ok(())
}

fn write_outputs(cfg: &TrainConfig, runs: &[SeedRun], name: &str, prefix_method: bool) -> Result<RunReport> {
    let out = &cfg.out_dir;
    let mut all_history = Vec::new();
    for run in runs {
        let dir = out.join(format!("seed_{}", run.result.seed));
        let prefix = if prefix_method { format!("{}_", run.result.method.as_str()) } else { String::new() };
        save_pair(run, &dir, &prefix)?;
        report::write_history_csv(&dir.join(format!("{prefix}history.csv")), &run.history)?;
        all_history.extend(run.history.iter().cloned());
    }
    report::write_history_csv(&out.join("history.csv"), &all_history)?;
    let rep = RunReport::new(
        cfg.hash(),
        serde_json::to_value(cfg)?,
        cfg.pretrained.is_some(),
        runs.iter().map(|r| r.result.clone()).collect(),
    );
    rep.write_json(&out.join(format!("{name}.json")))?;
    rep.write_csv(&out.join(format!("{name}.csv")))?;
    std::fs::write(out.join("config.resolved.json"), serde_json::to_string_pretty(cfg)? + "\n")
        .map_err(|e| Error::io(out.join("config.resolved.json"), e))?;
    Ok(rep)
}

fn run_all(cfg: &TrainConfig, jobs: &[(u64, Method)]) -> Result<Vec<SeedRun>> {
    let pretrained = load_pretrained(cfg)?;
    let runs = exec::map_slice(cfg.execution, jobs, |&(seed, method)| {
        info!("training {} seed {seed}", method.as_str());
        run_seed(cfg, method, seed, pretrained.as_ref())
    });
    runs.into_iter().collect()
}

/// Runs `cfg.method` for every seed. Returns `None` for a dry run.
pub fn cmd_train(cfg: &TrainConfig, dry_run: bool) -> Result<Option<RunReport>> {
    if dry_run {
        print!("{}", cfg.plan_summary(&[cfg.method]));
        return Ok(None);
    }
    let jobs: Vec<(u64, Method)> = cfg.seeds.iter().map(|&s| (s, cfg.method)).collect();
    let runs = run_all(cfg, &jobs)?;
    write_outputs(cfg, &runs, "report", false).map(Some)
}

/// Vanilla, DML and ours under matched seeds.
pub fn cmd_compare(cfg: &TrainConfig, dry_run: bool) -> Result<Option<RunReport>> {
    let methods = [Method::Vanilla, Method::Dml, Method::Ours];
    if dry_run {
        print!("{}", cfg.plan_summary(&methods));
        return Ok(None);
    }
    let jobs: Vec<(u64, Method)> = cfg.seeds.iter().flat_map(|&s| methods.map(|m| (s, m))).collect();
    let runs = run_all(cfg, &jobs)?;
    write_outputs(cfg, &runs, "compare", true).map(Some)
}

/// Ensemble metrics of a stored network on the evaluation split of `seed`.
pub fn cmd_eval(cfg: &TrainConfig, checkpoint: &Path, seed: u64) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint, Some(&cfg.architecture))?;
    let data_seed = ck.seed.unwrap_or(seed);
    let (train, val) = dataset_for(cfg, data_seed)?;
    let data = if val.is_empty() { &train } else { &val };
    evaluate_model(&ck.model, data, cfg, seed)
}

/// Trains the deterministic network for B2's means and writes it to `path`.
pub fn cmd_pretrain(cfg: &TrainConfig, seed: u64, path: &Path) -> Result<Vec<f64>> {
    let (train, val) = dataset_for(cfg, seed)?;
    let mut model = BnnModel::new(cfg.architecture.clone(), cfg.sampling, cfg.prior, &mut rng::stream(seed, PRETRAIN_STREAM))?;
    let losses = trainer::train_deterministic(
        &mut model,
        &train,
        cfg.pretrain.epochs,
        cfg.pretrain.lr,
        cfg.schedule.batch_size,
        cfg.hyper.adam,
        &mut rng::stream(seed, PRETRAIN_STREAM + 1),
    )?;
    let data = if val.is_empty() { &train } else { &val };
    info!("deterministic model accuracy {:.4}", trainer::mean_accuracy(&model, data)?);
    let mut ck = Checkpoint::from_model(CheckpointKind::Deterministic, model);
    ck.seed = Some(seed);
    ck.config_hash = Some(cfg.hash());
    ck.save(path)?;
    Ok(losses)
}

/// Writes the standardized train and validation splits as label-last CSV files.
pub fn cmd_make_data(cfg: &TrainConfig, seed: u64, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, val) = data::make_dataset(&cfg.dataset, seed, cfg.validation_fraction)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, d: &Dataset| -> Result<PathBuf> {
        let path = dir.join(name);
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
        for (row, y) in d.x.rows().zip(&d.y) {
            let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    Ok((write("train.csv", &train)?, write("val.csv", &val)?))
}

/// One row of the gradient-check table.
#[derive(Clone, Debug)]
pub struct GradRow {
    pub name: String,
    pub inputs: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;

fn micro_setup(seed: u64, mode: SamplingMode) -> Result<(BnnModel, Vec<LayerNoise>, Tensor, Vec<usize>)> {
    let arch = Architecture::mlp(&[3, 5, 4, 3])?;
    let mut r = rng::stream(seed, 0);
    let mut model = BnnModel::new(arch, mode, PriorSpec::new(0.5)?, &mut r)?;
    // move sigma away from the init value so the rho gradients are not all alike
    for l in &mut model.layers {
        for t in [&mut l.rho_w, &mut l.rho_b] {
            t.data_mut().iter_mut().for_each(|x| *x += rand_shift(&mut r));
        }
    }
    let noise = model.sample_noise(&mut r);
    let x = Tensor::new(vec![4, 3], (0..12).map(|_| rand_shift(&mut r) * 2.0).collect())?;
    Ok((model, noise, x, vec![0, 2, 1, 2]))
}

fn rand_shift(r: &mut Rng) -> f64 {
    use rand::Rng as _;
    r.random_range(-1.0..1.0)
}

fn model_point(model: &BnnModel) -> Vec<Tensor> {
    model.layers.iter().flat_map(|l| [l.mu_w.clone(), l.rho_w.clone(), l.mu_b.clone(), l.rho_b.clone()]).collect()
}

fn vars_from(leaves: &[Var]) -> ModelVars {
    ModelVars {
        layers: leaves.chunks(4).map(|c| LayerVars { mu_w: c[0], rho_w: c[1], mu_b: c[2], rho_b: c[3] }).collect(),
    }
}

fn row(name: &str, point: &[Tensor], report: autodiff::GradCheckReport) -> GradRow {
    GradRow {
        name: name.into(),
        inputs: point.iter().map(Tensor::numel).sum(),
        max_rel_error: report.max_rel_error,
        passed: report.passed,
    }
}

/// Finite-difference checks of every loss term on small random models.
pub fn gradcheck_rows(seed: u64) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();

    for mode in [SamplingMode::Bbb, SamplingMode::Radial] {
        let (model, noise, x, y) = micro_setup(seed, mode)?;
        let point = model_point(&model);
        let rep = autodiff::grad_check(
            |g, v| {
                let xv = g.constant(x.clone())?;
                Ok(variational::elbo_loss(g, &model, &vars_from(v), xv, &y, &noise, 50)?.loss)
            },
            &point,
            GRAD_STEP,
            GRAD_TOL,
        )?;
        rows.push(row(&format!("elbo ({mode:?})"), &point, rep));
    }

    let (model, noise, x, y) = micro_setup(seed, SamplingMode::Bbb)?;
    let point = model_point(&model);
    let peer_soft = {
        let (m2, n2, _, _) = micro_setup(seed + 1, SamplingMode::Bbb)?;
        let (z, _) = variational::forward_values(&m2, &x, &n2)?;
        (z, m2, n2)
    };
    for t in [1.0, 3.0] {
        let target = trainer::soft_logits(&peer_soft.0, t)?;
        let rep = autodiff::grad_check(
            |g, v| {
                let xv = g.constant(x.clone())?;
                let elbo = variational::elbo_loss(g, &model, &vars_from(v), xv, &y, &noise, 50)?;
                let kl = trainer::soft_target_kl(g, &target, elbo.forward.logits, t)?;
                let kl = g.scale(kl, t * t)?;
                g.add(elbo.loss, kl)
            },
            &point,
            GRAD_STEP,
            GRAD_TOL,
        )?;
        rows.push(row(&format!("logit loss (T={t})"), &point, rep));
    }

    for metric in [ParamMetric::W2, ParamMetric::Kl] {
        let other = peer_soft.1.posterior();
        // normalise the distance to about 1 so the softplus is far from saturation
        let scale = 1.0 / geometry::posterior_distance(metric, &model.posterior(), &other)?;
        let rep = autodiff::grad_check(
            |g, v| {
                let own = trainer::posterior_vars(g, &vars_from(v))?;
                let d = other.dim();
                let peer = GaussianVars {
                    mu: g.constant(Tensor::new(vec![1, d], other.mu().to_vec())?)?,
                    sigma: g.constant(Tensor::new(vec![1, d], other.sigma().to_vec())?)?,
                };
                let dist = geometry::posterior_distance_var(g, metric, own, peer)?;
                let dist = g.scale(dist, scale)?;
                geometry::diverse_param_loss_var(g, dist)
            },
            &point,
            GRAD_STEP,
            GRAD_TOL,
        )?;
        rows.push(row(&format!("param diversity ({metric:?})"), &point, rep));
    }

    let fusion = features::FusionConfig { tokens: 2, attn_dim: 3, ..Default::default() };
    let plan = fusion.plan(model.arch.num_blocks())?;
    let widths: Vec<usize> = (1..=model.arch.num_blocks()).map(|k| model.arch.block_width(k)).collect();
    let mut r = rng::stream(seed, 9);
    let attn_own = features::init_attention(&widths, &fusion, &plan, &mut r);
    let attn_peer = features::init_attention(&widths, &fusion, &plan, &mut r);
    let peer_fused: Vec<Tensor> = {
        let (m2, n2) = (&peer_soft.1, &peer_soft.2);
        let mut g = Graph::new();
        let vars = m2.register(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = variational::forward(&mut g, m2, &vars, xv, n2)?;
        let av = attn_peer.iter().map(|a| a.register(&mut g, false)).collect::<Result<Vec<_>>>()?;
        let fused = trainer::fuse_all(&mut g, m2, &av, &out.features, &plan, fusion.tokens, fusion.scaled)?;
        fused.iter().map(|&f| g.value(f).clone()).collect()
    };
    let mut point = model_point(&model);
    let n_model = point.len();
    point.extend(attn_own.iter().flat_map(|a| a.tensors().map(Tensor::clone)));
    let rep = autodiff::grad_check(
        |g, v| {
            let vars = vars_from(&v[..n_model]);
            let av: Vec<features::AttentionVars> = v[n_model..]
                .chunks(3)
                .map(|c| features::AttentionVars { w_q: c[0], w_k: c[1], w_v: c[2] })
                .collect();
            let xv = g.constant(x.clone())?;
            let out = variational::forward(g, &model, &vars, xv, &noise)?;
            let own = trainer::fuse_all(g, &model, &av, &out.features, &plan, fusion.tokens, fusion.scaled)?;
            let mut total: Option<Var> = None;
            for (o, p) in own.iter().zip(&peer_fused) {
                let from = g.constant(p.clone())?;
                let kl = features::feature_kl_var(g, from, *o)?;
                total = Some(match total {
                    None => kl,
                    Some(t) => g.add(t, kl)?,
                });
            }
            features::diverse_feat_loss_var(g, total.expect("plan is not empty"))
        },
        &point,
        GRAD_STEP,
        GRAD_TOL,
    )?;
    rows.push(row("feature diversity", &point, rep));
    Ok(rows)
}

/// A deliberately wrong gradient (every entry scaled by 1.01) must fail the check.
pub fn gradcheck_negative_control(seed: u64) -> Result<GradRow> {
    let (model, noise, x, y) = micro_setup(seed, SamplingMode::Bbb)?;
    let point = model_point(&model);
    let loss = |p: &[Tensor], leaves: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vs = p
            .iter()
            .map(|t| if leaves { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let xv = g.constant(x.clone())?;
        let l = variational::elbo_loss(&mut g, &model, &vars_from(&vs), xv, &y, &noise, 50)?.loss;
        let value = g.value(l).item();
        if !leaves {
            return Ok((value, Vec::new()));
        }
        g.backward(l)?;
        Ok((value, vs.iter().map(|&v| g.grad(v).expect("leaf").map(|d| d * 1.01)).collect()))
    };
    let rep = autodiff::grad_check_with(
        |p| loss(p, true),
        |p| loss(p, false).map(|r| r.0),
        &point,
        GRAD_STEP,
        GRAD_TOL,
        Execution::Parallel,
    )?;
    Ok(row("negative control (corrupted backward)", &point, rep))
}

/// Formats the table; the second value is `true` when every check behaved.
pub fn cmd_gradcheck(seed: u64) -> Result<(String, bool)> {
    let rows = gradcheck_rows(seed)?;
    let control = gradcheck_negative_control(seed)?;
    let mut s = String::new();
    let _ = writeln!(s, "{:<40} {:>7} {:>14}  result", "check", "inputs", "max rel err");
    for r in &rows {
        let _ = writeln!(s, "{:<40} {:>7} {:>14.3e}  {}", r.name, r.inputs, r.max_rel_error, if r.passed { "PASS" } else { "FAIL" });
    }
    let detected = !control.passed;
    let _ = writeln!(
        s,
        "{:<40} {:>7} {:>14.3e}  {}",
        control.name,
        control.inputs,
        control.max_rel_error,
        if detected { "PASS (detected)" } else { "FAIL (not detected)" }
    );
    let ok = rows.iter().all(|r| r.passed) && detected;
    let _ = writeln!(s, "tolerance {GRAD_TOL:e}: {}", if ok { "all checks passed" } else { "FAILED" });
    Ok((s, ok))
}
