//! Experiment configuration: a JSON file with every field optional, resolved
//! against a preset and validated before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::features::FusionConfig;
use crate::geometry::ParamMetric;
use crate::metrics::{DEFAULT_BINS, DEFAULT_FRACTIONS, DEFAULT_SAMPLES};
use crate::trainer::{AdamConfig, Hyperparams, Method, Schedule};
use crate::variational::{Architecture, PriorSpec, SamplingMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub samples: usize,
    pub bins: usize,
    pub fractions: Vec<f64>,
    /// Seed of the evaluation noise streams.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { samples: DEFAULT_SAMPLES, bins: DEFAULT_BINS, fractions: DEFAULT_FRACTIONS.to_vec(), seed: 0 }
    }
}

/// Training of the deterministic network used to initialise B2's means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub sampling: SamplingMode,
    pub prior: PriorSpec,
    pub hyper: Hyperparams,
    pub schedule: Schedule,
    pub dataset: DatasetSpec,
    pub validation_fraction: f64,
    pub seeds: Vec<u64>,
    /// Method run by `train`; `compare` runs all three.
    pub method: Method,
    pub eval: EvalOptions,
    pub pretrain: PretrainOptions,
    /// Deterministic checkpoint for B2's means; `None` trains both peers from scratch.
    pub pretrained: Option<PathBuf>,
    #[serde(skip)]
    pub execution: Execution,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `T = 3, alpha = 1, beta = 2`
    #[default]
    SmallDataset,
    /// `T = alpha = beta = 1`
    LargeScale,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArchitecture {
    widths: Option<Vec<i64>>,
    block_ends: Option<Vec<i64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHyper {
    temperature: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    metric: Option<ParamMetric>,
    clip_norm: Option<f64>,
    fusion: Option<FusionConfig>,
    adam: Option<AdamConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    stage1_epochs: Option<i64>,
    stage2_epochs: Option<i64>,
    lr: Option<f64>,
    stage1_decay: Option<Vec<i64>>,
    stage2_decay: Option<Vec<i64>>,
    decay_factor: Option<f64>,
    batch_size: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    samples: Option<i64>,
    bins: Option<i64>,
    fractions: Option<Vec<f64>>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPretrain {
    epochs: Option<i64>,
    lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<Preset>,
    architecture: Option<RawArchitecture>,
    sampling: Option<SamplingMode>,
    prior_std: Option<f64>,
    hyper: Option<RawHyper>,
    schedule: Option<RawSchedule>,
    dataset: Option<DatasetSpec>,
    validation_fraction: Option<f64>,
    seeds: Option<Vec<u64>>,
    method: Option<Method>,
    eval: Option<RawEval>,
    pretrain: Option<RawPretrain>,
    pretrained: Option<PathBuf>,
    execution: Option<Execution>,
    out_dir: Option<PathBuf>,
}

fn count(key: &str, v: i64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::config(key, format!("must be >= 0, got {v}")))
}

fn positive(key: &str, v: i64) -> Result<usize> {
    match count(key, v)? {
        0 => Err(Error::config(key, "must be positive")),
        n => Ok(n),
    }
}

fn counts(key: &str, v: Vec<i64>) -> Result<Vec<usize>> {
    v.into_iter().map(|x| count(key, x)).collect()
}

fn positive_f64(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(key, format!("must be a positive number, got {v}")))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::resolve_str("{}").expect("empty config resolves")
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::resolve_str(&text)?;
        if let Some(p) = cfg.pretrained.take() {
            // relative checkpoint paths are taken relative to the config file
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.pretrained = Some(if p.is_relative() { base.join(p) } else { p });
        }
        Ok(cfg)
    }

    /// Parses and validates JSON text; absent fields take the preset's defaults.
    pub fn resolve_str(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)?;
        Self::resolve(raw)
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let preset = raw.preset.unwrap_or_default();
        let base_hyper = match preset {
            Preset::SmallDataset => Hyperparams::small_dataset(),
            Preset::LargeScale => Hyperparams::large_scale(),
        };

        let ra = raw.architecture.unwrap_or_default();
        let widths = match ra.widths {
            Some(w) => w.into_iter().map(|x| positive("architecture.widths", x)).collect::<Result<Vec<_>>>()?,
            None => vec![2, 64, 64, 2],
        };
        let mut architecture = Architecture { block_ends: (1..widths.len()).collect(), widths };
        if let Some(ends) = ra.block_ends {
            architecture.block_ends = counts("architecture.block_ends", ends)?;
        }
        architecture.validate()?;

        let prior = PriorSpec::new(raw.prior_std.unwrap_or(PriorSpec::default().std))
            .map_err(|e| Error::config("prior_std", e.to_string()))?;

        let rh = raw.hyper.unwrap_or_default();
        let hyper = Hyperparams {
            temperature: rh.temperature.unwrap_or(base_hyper.temperature),
            alpha: rh.alpha.unwrap_or(base_hyper.alpha),
            beta: rh.beta.unwrap_or(base_hyper.beta),
            metric: rh.metric.unwrap_or(base_hyper.metric),
            clip_norm: rh.clip_norm.or(base_hyper.clip_norm),
            fusion: rh.fusion.unwrap_or(base_hyper.fusion),
            adam: rh.adam.unwrap_or(base_hyper.adam),
        };
        hyper.validate()?;
        hyper.fusion.plan(architecture.num_blocks()).map_err(|e| Error::config("hyper.fusion.pairs", e.to_string()))?;

        let rs = raw.schedule.unwrap_or_default();
        let d = Schedule::default();
        let schedule = Schedule {
            stage1_epochs: rs.stage1_epochs.map(|v| count("schedule.stage1_epochs", v)).transpose()?.unwrap_or(d.stage1_epochs),
            stage2_epochs: rs.stage2_epochs.map(|v| count("schedule.stage2_epochs", v)).transpose()?.unwrap_or(d.stage2_epochs),
            lr: rs.lr.map(|v| positive_f64("schedule.lr", v)).transpose()?.unwrap_or(d.lr),
            stage1_decay: rs.stage1_decay.map(|v| counts("schedule.stage1_decay", v)).transpose()?.unwrap_or(d.stage1_decay),
            stage2_decay: rs.stage2_decay.map(|v| counts("schedule.stage2_decay", v)).transpose()?.unwrap_or(d.stage2_decay),
            decay_factor: rs
                .decay_factor
                .map(|v| positive_f64("schedule.decay_factor", v))
                .transpose()?
                .unwrap_or(d.decay_factor),
            batch_size: rs.batch_size.map(|v| positive("schedule.batch_size", v)).transpose()?.unwrap_or(d.batch_size),
        };

        let dataset = raw.dataset.unwrap_or(DatasetSpec::TwoMoons { n: 1000, noise: 0.1, label_noise: 0.0 });
        if let Some(c) = dataset.num_classes_hint() {
            if c != architecture.num_classes() {
                return Err(Error::config(
                    "architecture.widths",
                    format!("output width {} does not match the dataset's {c} classes", architecture.num_classes()),
                ));
            }
        }
        let validation_fraction = raw.validation_fraction.unwrap_or(0.2);
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::config("validation_fraction", "must lie in [0, 1)"));
        }
        let seeds = raw.seeds.unwrap_or_else(|| vec![0, 1, 2]);
        if seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }

        let re = raw.eval.unwrap_or_default();
        let de = EvalOptions::default();
        let eval = EvalOptions {
            samples: re.samples.map(|v| positive("eval.samples", v)).transpose()?.unwrap_or(de.samples),
            bins: re.bins.map(|v| positive("eval.bins", v)).transpose()?.unwrap_or(de.bins),
            fractions: re.fractions.unwrap_or(de.fractions),
            seed: re.seed.unwrap_or(de.seed),
        };
        if let Some(f) = eval.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config("eval.fractions", format!("{f} is outside (0, 1]")));
        }

        let rp = raw.pretrain.unwrap_or_default();
        let pretrain = PretrainOptions {
            epochs: rp.epochs.map(|v| count("pretrain.epochs", v)).transpose()?.unwrap_or(schedule.stage1_epochs),
            lr: rp.lr.map(|v| positive_f64("pretrain.lr", v)).transpose()?.unwrap_or(schedule.lr),
        };

        Ok(TrainConfig {
            architecture,
            sampling: raw.sampling.unwrap_or_default(),
            prior,
            hyper,
            schedule,
            dataset,
            validation_fraction,
            seeds,
            method: raw.method.unwrap_or(Method::Ours),
            eval,
            pretrain,
            pretrained: raw.pretrained,
            execution: raw.execution.unwrap_or_default(),
            out_dir: raw.out_dir.unwrap_or_else(|| PathBuf::from("runs")),
        })
    }

    /// Hash of everything that influences results (output location excluded).
    pub fn hash(&self) -> String {
        super::hash_json(self)
    }

    /// Human-readable summary for `--dry-run`.
    pub fn plan_summary(&self, methods: &[Method]) -> String {
        let mut s = String::new();
        let arch = &self.architecture;
        s.push_str(&format!("config hash     {}\n", self.hash()));
        s.push_str(&format!("architecture    {:?} blocks end at {:?} ({} params)\n", arch.widths, arch.block_ends, arch.num_params()));
        s.push_str(&format!("sampling        {:?}, prior std {}\n", self.sampling, self.prior.std));
        s.push_str(&format!(
            "hyper           T={} alpha={} beta={} metric={:?} clip={:?}\n",
            self.hyper.temperature, self.hyper.alpha, self.hyper.beta, self.hyper.metric, self.hyper.clip_norm
        ));
        let plan = self.hyper.fusion.plan(arch.num_blocks()).unwrap_or_default();
        s.push_str(&format!("fused pairs     {plan:?}\n"));
        let sc = &self.schedule;
        s.push_str(&format!(
            "schedule        {}+{} epochs, lr {} (/{} at {:?} | {:?}), batch {}\n",
            sc.stage1_epochs, sc.stage2_epochs, sc.lr, sc.decay_factor, sc.stage1_decay, sc.stage2_decay, sc.batch_size
        ));
        s.push_str(&format!("dataset         {}\n", serde_json::to_string(&self.dataset).unwrap_or_default()));
        s.push_str(&format!("seeds           {:?}\n", self.seeds));
        s.push_str(&format!(
            "methods         {}\n",
            methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
        ));
        s.push_str(&format!(
            "eval            S={} bins={} fractions={:?}\n",
            self.eval.samples, self.eval.bins, self.eval.fractions
        ));
        match &self.pretrained {
            Some(p) => s.push_str(&format!("b2 means from   {}\n", p.display())),
            None => s.push_str("b2 means from   random init\n"),
        }
        s.push_str(&format!("output          {}\n", self.out_dir.display()));
        s
    }
}
