//! Run reports: epoch-history CSV, final metrics as JSON and CSV, and console tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::trainer::{EpochRecord, Method};

/// One line of `history.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub seed: u64,
    pub config_hash: String,
    pub method: Method,
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub elbo_b1: f64,
    pub elbo_b2: f64,
    pub logit_kl_b1: Option<f64>,
    pub logit_kl_b2: Option<f64>,
    pub d_param: f64,
    pub feat_kl_b1: Option<f64>,
    pub feat_kl_b2: Option<f64>,
    pub loss_b1: f64,
    pub loss_b2: f64,
    pub val_acc_b1: f64,
    pub val_acc_b2: f64,
}

impl HistoryRow {
    pub fn new(seed: u64, config_hash: &str, r: &EpochRecord) -> Self {
        HistoryRow {
            seed,
            config_hash: config_hash.to_string(),
            method: r.method,
            stage: r.stage,
            epoch: r.epoch,
            lr: r.lr,
            elbo_b1: r.elbo_b1,
            elbo_b2: r.elbo_b2,
            logit_kl_b1: r.logit_kl_b1,
            logit_kl_b2: r.logit_kl_b2,
            d_param: r.d_param,
            feat_kl_b1: r.feat_kl_b1,
            feat_kl_b2: r.feat_kl_b2,
            loss_b1: r.loss_b1,
            loss_b2: r.loss_b2,
            val_acc_b1: r.val_acc_b1,
            val_acc_b2: r.val_acc_b2,
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes rows with a header line; `None` components become empty cells.
pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub method: Method,
    pub config_hash: String,
    /// `"ok"` or `"FAILED"`.
    pub status: String,
    pub failure: Option<String>,
    pub last_good_epoch: Option<usize>,
    pub b1: Option<MetricsReport>,
    pub b2: Option<MetricsReport>,
    /// Squared 2-Wasserstein distance between the final posteriors.
    pub final_w2: Option<f64>,
}

impl RunResult {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Seed-averaged metrics of one peer (`B1`, `B2`) or of both (`Average`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub peer: String,
    pub seeds: usize,
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub mean_bald: f64,
    pub retention: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: serde_json::Value,
    /// B2 started from a deterministic network's means.
    pub pretrained_b2: bool,
    pub results: Vec<RunResult>,
    pub aggregate: Vec<AggregateRow>,
}

fn mean_of(reports: &[&MetricsReport], f: impl Fn(&MetricsReport) -> f64) -> f64 {
    reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64
}

fn aggregate_row(method: Method, peer: &str, reports: &[&MetricsReport]) -> AggregateRow {
    let retention = reports[0]
        .retention
        .iter()
        .enumerate()
        .map(|(i, &(f, _))| (f, reports.iter().map(|r| r.retention[i].1).sum::<f64>() / reports.len() as f64))
        .collect();
    AggregateRow {
        method,
        peer: peer.to_string(),
        seeds: reports.len(),
        acc: mean_of(reports, |r| r.acc),
        nll: mean_of(reports, |r| r.nll),
        ece: mean_of(reports, |r| r.ece),
        mean_bald: mean_of(reports, |r| r.mean_bald),
        retention,
    }
}

impl RunReport {
    pub fn new(config_hash: String, config: serde_json::Value, pretrained_b2: bool, results: Vec<RunResult>) -> Self {
        let mut aggregate = Vec::new();
        for method in [Method::Vanilla, Method::Dml, Method::Ours] {
            let done: Vec<&RunResult> = results.iter().filter(|r| r.method == method && r.ok()).collect();
            let b1: Vec<&MetricsReport> = done.iter().filter_map(|r| r.b1.as_ref()).collect();
            let b2: Vec<&MetricsReport> = done.iter().filter_map(|r| r.b2.as_ref()).collect();
            if b1.is_empty() || b2.is_empty() {
                continue;
            }
            let both: Vec<&MetricsReport> = b1.iter().chain(&b2).copied().collect();
            aggregate.push(aggregate_row(method, "B1", &b1));
            aggregate.push(aggregate_row(method, "B2", &b2));
            aggregate.push(aggregate_row(method, "Average", &both));
        }
        RunReport { config_hash, config, pretrained_b2, results, aggregate }
    }

    pub fn failed(&self) -> bool {
        self.results.iter().any(|r| !r.ok())
    }

    pub fn aggregate_for(&self, method: Method, peer: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| a.method == method && a.peer == peer)
    }

    fn fractions(&self) -> Vec<f64> {
        self.aggregate.first().map(|a| a.retention.iter().map(|p| p.0).collect()).unwrap_or_default()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Per-seed rows then seed-mean rows (`seed = mean`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let fr = self.fractions();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> =
            ["seed", "config_hash", "method", "peer", "status", "acc", "nll", "ece", "mean_bald"].map(String::from).to_vec();
        header.extend(fr.iter().map(|f| format!("retained_{}", (f * 100.0).round())));
        w.write_record(&header)?;
        let num = |x: f64| x.to_string();
        for r in &self.results {
            for (peer, m) in [("B1", &r.b1), ("B2", &r.b2)] {
                let mut rec = vec![r.seed.to_string(), r.config_hash.clone(), r.method.as_str().into(), peer.into(), r.status.clone()];
                match m {
                    Some(m) => {
                        rec.extend([num(m.acc), num(m.nll), num(m.ece), num(m.mean_bald)]);
                        rec.extend(m.retention.iter().map(|p| num(p.1)));
                    }
                    None => rec.extend(std::iter::repeat_n(String::new(), 4 + fr.len())),
                }
                w.write_record(&rec)?;
            }
        }
        for a in &self.aggregate {
            let mut rec = vec!["mean".to_string(), self.config_hash.clone(), a.method.as_str().into(), a.peer.clone(), "ok".into()];
            rec.extend([num(a.acc), num(a.nll), num(a.ece), num(a.mean_bald)]);
            rec.extend(a.retention.iter().map(|p| num(p.1)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// ACC / NLL / ECE per peer with one column per method, plus the `Average` row.
    pub fn comparison_table(&self) -> String {
        let methods: Vec<Method> =
            [Method::Vanilla, Method::Dml, Method::Ours].into_iter().filter(|m| self.aggregate_for(*m, "B1").is_some()).collect();
        let mut s = String::new();
        let _ = write!(s, "{:<9}", "Model");
        for metric in ["ACC", "NLL", "ECE"] {
            for m in &methods {
                let _ = write!(s, " {:>12}", format!("{metric} {}", m.as_str()));
            }
        }
        s.push('\n');
        for peer in ["B1", "B2", "Average"] {
            let label = if peer == "B2" && self.pretrained_b2 { "B2*" } else { peer };
            let _ = write!(s, "{label:<9}");
            for metric in 0..3 {
                for m in &methods {
                    let a = self.aggregate_for(*m, peer).expect("row exists");
                    let v = match metric {
                        0 => format!("{:.2}", a.acc * 100.0),
                        1 => format!("{:.3}", a.nll),
                        _ => format!("{:.3}", a.ece),
                    };
                    let _ = write!(s, " {v:>12}");
                }
            }
            s.push('\n');
        }
        s
    }

    /// Accuracy (%) on the lowest-uncertainty fraction of the evaluation set.
    pub fn retention_table(&self) -> String {
        let fr = self.fractions();
        let mut s = String::new();
        let _ = write!(s, "{:<9} {:<9}", "Method", "Model");
        for f in &fr {
            let _ = write!(s, " {:>14}", format!("{}% retained", (f * 100.0).round()));
        }
        s.push('\n');
        for a in &self.aggregate {
            let label = if a.peer == "B2" && self.pretrained_b2 { "B2*" } else { a.peer.as_str() };
            let _ = write!(s, "{:<9} {:<9}", a.method.as_str(), label);
            for p in &a.retention {
                let _ = write!(s, " {:>14.2}", p.1 * 100.0);
            }
            s.push('\n');
        }
        s
    }
}
