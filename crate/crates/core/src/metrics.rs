//! Chamfer distance, F-score, diagonal-Gaussian KL divergence and
//! classification accuracy, each as a plain function and, where a loss
//! needs it, as a differentiable graph on a [`Tape`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vrckit_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{dist2, Point};

/// F-score threshold: 1% of the unit-normalized diameter scale.
pub const DEFAULT_TAU: f64 = 0.01;

/// Chamfer distances are shown multiplied by this factor.
pub const CD_DISPLAY_SCALE: f64 = 1e4;

fn nearest(x: &Point, q: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, y) in q.iter().enumerate() {
        let d = dist2(x, y);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Index of the nearest `q` point for every `p` point (ties to the smaller index).
pub fn nearest_indices(p: &[Point], q: &[Point]) -> Result<Vec<usize>> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(p.iter().map(|x| nearest(x, q).0).collect())
}

/// Terms are summed in ascending order, which makes the result independent
/// of point order.
fn mean_nearest_dist2(p: &[Point], q: &[Point]) -> f64 {
    let mut terms: Vec<f64> = p.iter().map(|x| nearest(x, q).1).collect();
    terms.sort_unstable_by(f64::total_cmp);
    let mut s = 0.0;
    for t in terms {
        s += t;
    }
    s / p.len() as f64
}

/// Symmetric Chamfer distance with squared Euclidean norms. Bit-identical
/// under any reordering of either cloud.
pub fn chamfer_distance(p: &[Point], q: &[Point]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(mean_nearest_dist2(p, q) + mean_nearest_dist2(q, p))
}

/// Chamfer distance between two `[N, 3]` nodes. Matches are fixed from the
/// current values; gradients flow to both clouds through the matched pairs.
pub fn chamfer_tape(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let pv = tape.value(p).to_points()?;
    let qv = tape.value(q).to_points()?;
    let pq = nearest_indices(&pv, &qv)?;
    let qp = nearest_indices(&qv, &pv)?;
    let a = one_sided(tape, p, q, pq)?;
    let b = one_sided(tape, q, p, qp)?;
    Ok(tape.add(a, b)?)
}

fn one_sided(tape: &mut Tape, from: Var, to: Var, matches: Vec<usize>) -> Result<Var> {
    let matched = tape.gather(to, matches)?;
    let diff = tape.sub(from, matched)?;
    let sq = tape.square(diff)?;
    let per_point = tape.sum(sq, 1)?;
    Ok(tape.mean(per_point, 0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn harmonic(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn fraction_within(p: &[Point], q: &[Point], tau: f64) -> f64 {
    let hits = p.iter().filter(|x| nearest(x, q).1.sqrt() < tau).count();
    hits as f64 / p.len() as f64
}

/// Precision (share of `p` within `tau` of `q`), recall (the reverse) and
/// their harmonic mean. Distances are unsquared.
pub fn fscore(p: &[Point], q: &[Point], tau: f64) -> Result<FScore> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "F-score threshold must be positive, got {tau}"
        )));
    }
    let precision = fraction_within(p, q, tau);
    let recall = fraction_within(q, p, tau);
    Ok(FScore {
        precision,
        recall,
        f1: harmonic(precision, recall),
    })
}

/// Diagonal Gaussian given by mean and log-variance vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentDistribution {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::InvalidArgument(format!(
                "mean has {} entries but log-variance has {}",
                mu.len(),
                logvar.len()
            )));
        }
        if mu.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "latent distribution has non-finite entries".into(),
            ));
        }
        Ok(LatentDistribution { mu, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        LatentDistribution {
            mu: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// KL[q ‖ p] for diagonal Gaussians.
pub fn gaussian_kl(q: &LatentDistribution, p: &LatentDistribution) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::InvalidArgument(format!(
            "KL between dimensions {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut s = 0.0;
    for d in 0..q.dim() {
        let dm = q.mu[d] - p.mu[d];
        s += (q.logvar[d] - p.logvar[d]).exp() + dm * dm / p.logvar[d].exp() - 1.0 + p.logvar[d]
            - q.logvar[d];
    }
    Ok(0.5 * s)
}

/// Handles to a diagonal Gaussian's parameters on a tape, each `[1, D]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
}

impl LatentVars {
    pub fn value(&self, tape: &Tape) -> LatentDistribution {
        LatentDistribution {
            mu: tape.value(self.mu).data().to_vec(),
            logvar: tape.value(self.logvar).data().to_vec(),
        }
    }

    /// Standard normal as constants of width `dim`.
    pub fn standard(tape: &mut Tape, dim: usize) -> Self {
        LatentVars {
            mu: tape.constant(Tensor::zeros(&[1, dim])),
            logvar: tape.constant(Tensor::zeros(&[1, dim])),
        }
    }
}

/// Differentiable KL[q ‖ p].
pub fn gaussian_kl_tape(tape: &mut Tape, q: LatentVars, p: LatentVars) -> Result<Var> {
    if tape.shape(q.mu) != tape.shape(p.mu) || tape.shape(q.logvar) != tape.shape(p.logvar) {
        return Err(Error::InvalidArgument(format!(
            "KL between shapes {:?} and {:?}",
            tape.shape(q.mu),
            tape.shape(p.mu)
        )));
    }
    let log_ratio = tape.sub(p.logvar, q.logvar)?;
    let neg_log_ratio = tape.scale(log_ratio, -1.0)?;
    let var_ratio = tape.exp(neg_log_ratio)?;
    let dm = tape.sub(q.mu, p.mu)?;
    let dm2 = tape.square(dm)?;
    let neg_lv_p = tape.scale(p.logvar, -1.0)?;
    let inv_var_p = tape.exp(neg_lv_p)?;
    let mean_term = tape.mul(dm2, inv_var_p)?;
    let ratio = tape.add(var_ratio, mean_term)?;
    let t = tape.add(ratio, log_ratio)?;
    let t = tape.add_scalar(t, -1.0)?;
    let s = tape.sum_all(t)?;
    Ok(tape.scale(s, 0.5)?)
}

/// Overall accuracy and the unweighted mean of per-category accuracies
/// (categories with no true samples are skipped).
pub fn classification_metrics<S: AsRef<str>>(
    pred: &[S],
    truth: &[S],
    categories: &[S],
) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no labels to score".into()));
    }
    let known = |l: &str| categories.iter().any(|c| c.as_ref() == l);
    if let Some(bad) = pred
        .iter()
        .chain(truth)
        .map(AsRef::as_ref)
        .find(|l| !known(l))
    {
        return Err(Error::InvalidArgument(format!("unknown label {bad:?}")));
    }
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (p, t) in pred.iter().zip(truth) {
        let e = per.entry(t.as_ref()).or_default();
        e.1 += 1;
        if p.as_ref() == t.as_ref() {
            e.0 += 1;
            correct += 1;
        }
    }
    let acc = correct as f64 / truth.len() as f64;
    let avg = per.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / per.len() as f64;
    Ok((acc, avg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub cd: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub count: usize,
}

/// Completion quality over a set of samples. `cd` is stored unscaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_category: BTreeMap<String, CategoryStats>,
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub category: String,
    pub cd: f64,
    pub fscore: FScore,
}

impl MetricReport {
    /// Per-category means of CD, precision and recall; the top level is the
    /// unweighted mean over categories. Every F-score is the harmonic mean of
    /// the precision and recall beside it.
    pub fn from_samples(samples: &[SampleScore]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples to report".into()));
        }
        let mut sums: BTreeMap<&str, (f64, f64, f64, usize)> = BTreeMap::new();
        for s in samples {
            let e = sums.entry(&s.category).or_default();
            e.0 += s.cd;
            e.1 += s.fscore.precision;
            e.2 += s.fscore.recall;
            e.3 += 1;
        }
        let per_category: BTreeMap<String, CategoryStats> = sums
            .into_iter()
            .map(|(c, (cd, p, r, n))| {
                let (precision, recall) = (p / n as f64, r / n as f64);
                let stats = CategoryStats {
                    cd: cd / n as f64,
                    precision,
                    recall,
                    fscore: harmonic(precision, recall),
                    count: n,
                };
                (c.to_string(), stats)
            })
            .collect();
        let k = per_category.len() as f64;
        let cd = per_category.values().map(|s| s.cd).sum::<f64>() / k;
        let precision = per_category.values().map(|s| s.precision).sum::<f64>() / k;
        let recall = per_category.values().map(|s| s.recall).sum::<f64>() / k;
        Ok(MetricReport {
            cd,
            fscore: harmonic(precision, recall),
            precision,
            recall,
            per_category,
        })
    }

    pub fn cd_display(&self) -> f64 {
        self.cd * CD_DISPLAY_SCALE
    }
}
