//! Posterior-ensemble predictions and the evaluation metrics built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng;
use crate::tensor::{self, Tensor};
use crate::trainer::argmax;
use crate::variational::{self, BnnModel};

/// Guard inside the log of [`nll`].
pub const NLL_EPS: f64 = 1e-12;
pub const DEFAULT_SAMPLES: usize = 50;
pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_FRACTIONS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Averaged softmax output of `S` posterior samples, with the members kept.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    /// `n x C`
    pub mean: Tensor,
    /// `S` tensors of shape `n x C`.
    pub members: Vec<Tensor>,
}

impl EnsemblePrediction {
    /// Builds the mean from explicit member probabilities.
    pub fn from_members(members: Vec<Tensor>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::InvalidArgument("ensemble needs at least one member".into()))?;
        let shape = first.shape().to_vec();
        first.dims2()?;
        let mut mean = Tensor::zeros(&shape);
        for m in &members {
            if m.shape() != shape.as_slice() {
                return Err(Error::shape("ensemble", format!("member shape {:?} vs {:?}", m.shape(), shape)));
            }
            for (a, b) in mean.data_mut().iter_mut().zip(m.data()) {
                *a += b;
            }
        }
        let s = members.len() as f64;
        mean.data_mut().iter_mut().for_each(|a| *a /= s);
        Ok(EnsemblePrediction { mean, members })
    }

    pub fn len(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> usize {
        self.members.len()
    }
}

/// `S` forward passes, member `s` drawing its weights from stream `s` of `seed`.
pub fn ensemble_predict(model: &BnnModel, x: &Tensor, samples: usize, seed: u64, exec: Execution) -> Result<EnsemblePrediction> {
    if samples == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let members = exec::map_indexed(exec, samples, |s| {
        let noise = model.sample_noise(&mut rng::stream(seed, s as u64));
        let (logits, _) = variational::forward_values(model, x, &noise)?;
        let (_, c) = logits.dims2()?;
        let data = logits.data().chunks(c).flat_map(tensor::softmax_row).collect();
        Tensor::new(logits.shape().to_vec(), data)
    });
    EnsemblePrediction::from_members(members.into_iter().collect::<Result<_>>()?)
}

fn check_labels(pred: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = pred.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("metrics", format!("{n} predictions vs {} labels", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")));
    }
    Ok((n, c))
}

/// Top-1 accuracy of `probs` (`n x C`); ties go to the lowest class index.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_labels(probs, labels)?;
    if n == 0 {
        return Ok(0.0);
    }
    let correct = probs.rows().zip(labels).filter(|(r, &y)| argmax(r) == y).count();
    Ok(correct as f64 / n as f64)
}

/// Mean of `-ln(max(p_true, 1e-12))`; the floor only guards against `ln 0`.
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_labels(probs, labels)?;
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = probs.rows().zip(labels).map(|(r, &y)| -r[y].max(NLL_EPS).ln()).sum();
    Ok(total / n as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins on `(0, 1]`,
/// confidence being the largest probability of each row.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    let (n, _) = check_labels(probs, labels)?;
    if n == 0 {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (r, &y) in probs.rows().zip(labels) {
        let pred = argmax(r);
        let conf = r[pred];
        let b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += usize::from(pred == y);
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n as f64) * (correct[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

/// Entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Per-sample mutual information `H(mean) - mean_s H(p_s)`.
pub fn bald(pred: &EnsemblePrediction) -> Vec<f64> {
    let s = pred.samples() as f64;
    (0..pred.len())
        .map(|i| {
            let member_h: f64 = pred.members.iter().map(|m| entropy(m.row(i))).sum::<f64>() / s;
            entropy(pred.mean.row(i)) - member_h
        })
        .collect()
}

/// For each fraction `f`, accuracy over the `floor(f N)` samples with the lowest
/// uncertainty (ties by sample index). At least one sample is always kept.
pub fn retention_curve(probs: &Tensor, labels: &[usize], uncertainty: &[f64], fractions: &[f64]) -> Result<Vec<(f64, f64)>> {
    let (n, _) = check_labels(probs, labels)?;
    if uncertainty.len() != n {
        return Err(Error::shape("retention_curve", format!("{n} predictions vs {} uncertainties", uncertainty.len())));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::InvalidArgument(format!("retained fraction {f} is outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("retention curve of an empty set".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(a.cmp(&b)));
    let hit: Vec<bool> = order.iter().map(|&i| argmax(probs.row(i)) == labels[i]).collect();
    let mut fr = fractions.to_vec();
    fr.sort_by(f64::total_cmp);
    Ok(fr
        .into_iter()
        .map(|f| {
            let k = ((f * n as f64 + 1e-9).floor() as usize).clamp(1, n);
            let acc = hit[..k].iter().filter(|&&h| h).count() as f64 / k as f64;
            (f, acc)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub mean_bald: f64,
    /// `(fraction retained, accuracy)`, fractions ascending.
    pub retention: Vec<(f64, f64)>,
    pub samples: usize,
    pub bins: usize,
    pub seed: u64,
}

/// Every metric of an ensemble prediction; retention ranks by BALD.
pub fn evaluate(pred: &EnsemblePrediction, labels: &[usize], fractions: &[f64], bins: usize, seed: u64) -> Result<MetricsReport> {
    let unc = bald(pred);
    let mean_bald = if unc.is_empty() { 0.0 } else { unc.iter().sum::<f64>() / unc.len() as f64 };
    Ok(MetricsReport {
        acc: accuracy(&pred.mean, labels)?,
        nll: nll(&pred.mean, labels)?,
        ece: ece(&pred.mean, labels, bins)?,
        mean_bald,
        retention: retention_curve(&pred.mean, labels, &unc, fractions)?,
        samples: pred.samples(),
        bins,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn accuracy_counts() {
        let p = probs(&[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4], &[0.3, 0.7]]);
        assert_eq!(accuracy(&p, &[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&p, &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&p, &[0, 1, 0, 2]).is_err());
    }

    #[test]
    fn nll_hand_cases() {
        let p = probs(&[&[0.5, 0.5], &[0.75, 0.25]]);
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((nll(&p, &[0, 1]).unwrap() - want).abs() < 1e-10);
        let u = probs(&[&[0.25; 4], &[0.25; 4]]);
        assert!((nll(&u, &[1, 3]).unwrap() - 4f64.ln()).abs() < 1e-11);
        assert!(nll(&probs(&[&[1.0, 0.0]]), &[1]).unwrap().is_finite());
    }

    #[test]
    fn ece_hand_cases() {
        assert!((ece(&probs(&[&[0.9, 0.1]]), &[0], 20).unwrap() - 0.1).abs() < 1e-15);
        let p = probs(&[&[0.6, 0.4], &[0.6, 0.4], &[0.9, 0.1], &[0.9, 0.1]]);
        assert!((ece(&p, &[0, 1, 0, 0], 20).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn bald_cases() {
        let a = probs(&[&[1.0, 0.0]]);
        let b = probs(&[&[0.0, 1.0]]);
        let pred = EnsemblePrediction::from_members(vec![a.clone(), b]).unwrap();
        assert!((bald(&pred)[0] - 2f64.ln()).abs() < 1e-15);
        let same = EnsemblePrediction::from_members(vec![a.clone(), a.clone(), a]).unwrap();
        assert_eq!(bald(&same)[0], 0.0);
    }

    #[test]
    fn retention_ranks_by_uncertainty() {
        let p = probs(&[&[0.9, 0.1], &[0.9, 0.1], &[0.9, 0.1], &[0.9, 0.1], &[0.9, 0.1]]);
        let labels = [0, 0, 1, 0, 1];
        let unc = [0.1, 0.2, 0.9, 0.3, 0.8];
        let curve = retention_curve(&p, &labels, &unc, &[1.0, 0.6]).unwrap();
        assert_eq!(curve, vec![(0.6, 1.0), (1.0, 0.6)]);
        assert!(retention_curve(&p, &labels, &unc, &[0.0]).is_err());
        assert!(retention_curve(&p, &labels, &unc, &[1.5]).is_err());
    }
}
