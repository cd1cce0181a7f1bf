//! Accuracy, calibration and OOD-classification metrics.
//!
//! Point predictions are modes of the predictive distribution. The discrete
//! CRPS is the exact integral of `(F(z) − 1{z ≥ y})²` for the step-function
//! CDF `F`, which reduces to `Σ_{z<y} F(z)² + Σ_{z≥y} (F(z) − 1)²` for
//! integer `y`. Gaussian kinds use the closed form.

use serde::{Deserialize, Serialize};

use crate::distributions::{GaussianParams, MomentMode, PredictiveDistribution, SupportTruncation};
use crate::error::{Error, Result};
use crate::exec;

/// Upper-tail terms are dropped once `(F − 1)²` falls below this.
const CRPS_TAIL_TOL: f64 = 1e-12;

/// Point prediction: the mode of `dist`.
pub fn point_prediction(dist: &PredictiveDistribution) -> Result<f64> {
    dist.mode(&SupportTruncation::default())
}

/// Mean absolute error between labels and predictive modes.
pub fn mae(dists: &[PredictiveDistribution], ys: &[f64]) -> Result<f64> {
    if dists.len() != ys.len() {
        return Err(Error::Shape {
            expected: dists.len(),
            got: ys.len(),
        });
    }
    if dists.is_empty() {
        return Err(Error::Domain("mae needs at least one example".into()));
    }
    let modes = exec::collect_results(exec::map(dists, point_prediction))?;
    Ok(modes.iter().zip(ys).map(|(m, y)| (m - y).abs()).sum::<f64>() / ys.len() as f64)
}

/// Continuous ranked probability score of `dist` at the observation `y`.
pub fn crps(dist: &PredictiveDistribution, y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Domain(format!("observation must be finite, got {y}")));
    }
    match dist {
        PredictiveDistribution::Gaussian(g) => Ok(gaussian_crps(g, y)),
        PredictiveDistribution::Mixture(m) if !dist.is_discrete() => {
            let comps: Vec<GaussianParams> = m
                .components()
                .iter()
                .map(|c| match c {
                    PredictiveDistribution::Gaussian(g) => *g,
                    _ => unreachable!("continuous mixtures hold Gaussians"),
                })
                .collect();
            Ok(gaussian_mixture_crps(&comps, y))
        }
        _ => {
            let table = dist.support_table(&SupportTruncation::default())?;
            Ok(step_crps(|z| table.cdf(z as f64), table.len(), y))
        }
    }
}

/// CRPS of a step CDF on the non-negative integers, exact for real `y`.
///
/// `cdf(z)` is `F` on `[z, z + 1)`; past `support_len` the CDF is flat and the
/// sum stops once `(F − 1)²` is negligible.
fn step_crps(cdf: impl Fn(u64) -> f64, support_len: usize, y: f64) -> f64 {
    let mut total = 0.0;
    if y < 0.0 {
        // the indicator is 1 on [y, 0) where F = 0
        total += -y;
    }
    let mut z: u64 = 0;
    loop {
        let f = cdf(z);
        let lo = z as f64;
        let hi = lo + 1.0;
        let below = (y.clamp(lo, hi) - lo) * f * f;
        let above = (hi - y.clamp(lo, hi)) * (f - 1.0) * (f - 1.0);
        total += below + above;
        z += 1;
        let past_support = z as usize >= support_len;
        if past_support && (z as f64) >= y && (f - 1.0) * (f - 1.0) < CRPS_TAIL_TOL {
            break;
        }
    }
    total
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// `σ[z(2Φ(z) − 1) + 2φ(z) − 1/√π]` with `z = (y − μ)/σ`.
pub fn gaussian_crps(g: &GaussianParams, y: f64) -> f64 {
    let s = g.sigma();
    let z = (y - g.mu) / s;
    s * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z)
        - 1.0 / std::f64::consts::PI.sqrt())
}

/// `E|X|` for `X ~ N(m, s²)`.
fn folded_normal_mean(m: f64, s: f64) -> f64 {
    if s == 0.0 {
        return m.abs();
    }
    s * (2.0 / std::f64::consts::PI).sqrt() * (-m * m / (2.0 * s * s)).exp()
        + m * (1.0 - 2.0 * std_normal_cdf(-m / s))
}

/// `E|X − y| − ½E|X − X'|` for a uniform Gaussian mixture.
fn gaussian_mixture_crps(comps: &[GaussianParams], y: f64) -> f64 {
    let k = comps.len() as f64;
    let first = comps
        .iter()
        .map(|c| folded_normal_mean(c.mu - y, c.sigma()))
        .sum::<f64>()
        / k;
    let mut second = 0.0;
    for a in comps {
        for b in comps {
            second += folded_normal_mean(a.mu - b.mu, (a.sigma2 + b.sigma2).sqrt());
        }
    }
    (first - 0.5 * second / (k * k)).max(0.0)
}

/// Median of `1 / variance`.
pub fn median_precision(variances: &[f64]) -> Result<f64> {
    if variances.is_empty() {
        return Err(Error::Domain("median precision of an empty list".into()));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("variances must be positive, got {v}")));
    }
    let mut prec: Vec<f64> = variances.iter().map(|v| 1.0 / v).collect();
    prec.sort_by(f64::total_cmp);
    let n = prec.len();
    Ok(if n % 2 == 1 {
        prec[n / 2]
    } else {
        0.5 * (prec[n / 2 - 1] + prec[n / 2])
    })
}

/// Per-example and aggregate evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub modes: Vec<f64>,
    pub crps: Vec<f64>,
    pub variances: Vec<f64>,
    pub mae: f64,
    pub crps_mean: f64,
    pub median_precision: f64,
}

/// Evaluate predictions against labels; variances use `moment_mode`.
pub fn evaluate(
    dists: &[PredictiveDistribution],
    ys: &[f64],
    moment_mode: MomentMode,
) -> Result<EvalRecord> {
    if dists.len() != ys.len() {
        return Err(Error::Shape {
            expected: dists.len(),
            got: ys.len(),
        });
    }
    if dists.is_empty() {
        return Err(Error::Domain("evaluation needs at least one example".into()));
    }
    let idx: Vec<usize> = (0..dists.len()).collect();
    let rows = exec::collect_results(exec::map(&idx, |&i| -> Result<(f64, f64, f64)> {
        let d = &dists[i];
        Ok((
            point_prediction(d)?,
            crps(d, ys[i])?,
            d.moments(moment_mode)?.variance,
        ))
    }))?;
    let n = ys.len() as f64;
    let modes: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let crps_v: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let variances: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mae = modes.iter().zip(ys).map(|(m, y)| (m - y).abs()).sum::<f64>() / n;
    let crps_mean = crps_v.iter().sum::<f64>() / n;
    let median_precision = median_precision(&variances)?;
    Ok(EvalRecord {
        modes,
        crps: crps_v,
        variances,
        mae,
        crps_mean,
        median_precision,
    })
}

/// Predictive uncertainty scores for in- and out-of-distribution inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OodScores {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl OodScores {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        if id_scores.is_empty() || ood_scores.is_empty() {
            return Err(Error::Domain("OOD score lists must be nonempty".into()));
        }
        if id_scores.iter().chain(&ood_scores).any(|s| s.is_nan()) {
            return Err(Error::Domain("OOD scores must not be NaN".into()));
        }
        Ok(Self {
            id_scores,
            ood_scores,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr80: f64,
}

/// Metrics for "higher score means OOD", with OOD as the positive class.
///
/// AUROC is the rank statistic `P(s_ood > s_id) + ½P(s_ood = s_id)`; AUPR is
/// the step-integrated precision over recall across all distinct
/// thresholds; FPR80 is the false-positive rate at the first (largest)
/// threshold whose true-positive rate reaches 0.8.
pub fn ood_curve_metrics(scores: &OodScores) -> CurveMetrics {
    let mut id = scores.id_scores.clone();
    id.sort_by(f64::total_cmp);
    let n_id = id.len() as f64;
    let n_ood = scores.ood_scores.len() as f64;
    let mut wins = 0.0;
    for &s in &scores.ood_scores {
        let below = id.partition_point(|&v| v < s);
        let not_above = id.partition_point(|&v| v <= s);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    let auroc = wins / (n_id * n_ood);

    // threshold sweep from the highest score downwards, one step per distinct value
    let mut all: Vec<(f64, bool)> = scores
        .id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(scores.ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut aupr = 0.0;
    let mut prev_recall = 0.0;
    let mut fpr80 = f64::NAN;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let recall = tp / n_ood;
        let precision = tp / (tp + fp);
        aupr += (recall - prev_recall) * precision;
        prev_recall = recall;
        if fpr80.is_nan() && recall >= 0.8 {
            fpr80 = fp / n_id;
        }
    }
    CurveMetrics { auroc, aupr, fpr80 }
}

/// One point of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// `TP / (TP + FP)`; 1 when nothing is flagged.
    pub precision: f64,
}

/// Curve metrics from a finite set of operating points.
///
/// The ROC is closed with `(0, 0)` and `(1, 1)` and integrated by the
/// trapezoid rule; precision is step-integrated over recall; FPR80 is the
/// smallest false-positive rate among points with TPR ≥ 0.8.
pub fn operating_point_metrics(points: &[OperatingPoint]) -> Result<CurveMetrics> {
    if points.is_empty() {
        return Err(Error::Domain("no operating points".into()));
    }
    let mut roc: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    roc.push((0.0, 0.0));
    roc.push((1.0, 1.0));
    roc.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let auroc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum();

    let mut pr: Vec<(f64, f64)> = points.iter().map(|p| (p.tpr, p.precision)).collect();
    pr.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut aupr = 0.0;
    let mut prev = 0.0;
    for (recall, precision) in pr {
        aupr += (recall - prev) * precision;
        prev = recall;
    }

    let fpr80 = points
        .iter()
        .filter(|p| p.tpr >= 0.8)
        .map(|p| p.fpr)
        .fold(f64::NAN, f64::min);
    Ok(CurveMetrics { auroc, aupr, fpr80 })
}

/// Family-agnostic metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub crps_mean: f64,
    pub median_precision: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aupr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fpr80: Option<f64>,
}

impl From<&EvalRecord> for MetricsReport {
    fn from(r: &EvalRecord) -> Self {
        Self {
            mae: r.mae,
            crps_mean: r.crps_mean,
            median_precision: r.median_precision,
            auroc: None,
            aupr: None,
            fpr80: None,
        }
    }
}

impl MetricsReport {
    pub fn with_ood(mut self, m: CurveMetrics) -> Self {
        self.auroc = Some(m.auroc);
        self.aupr = Some(m.aupr);
        self.fpr80 = Some(m.fpr80);
        self
    }
}
