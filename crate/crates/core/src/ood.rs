//! Threshold-based OOD detection with an ensemble's total predictive variance.
//!
//! Each repeat holds out a random fraction of the ID test scores, sets
//! `τ_α` to the `(1 − α)` quantile of the holdout, flags every remaining
//! input whose score exceeds `τ_α` as OOD, and sweeps `α` to trace ROC and
//! precision–recall operating points.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{ood_curve_metrics, operating_point_metrics, OodScores, OperatingPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodProtocolConfig {
    pub holdout_fraction: f64,
    pub n_repeats: usize,
    /// Sorted levels in `[0, 1]`.
    pub alpha_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for OodProtocolConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            n_repeats: 10,
            alpha_grid: (0..=1000).map(|i| i as f64 / 1000.0).collect(),
            seed: 0,
        }
    }
}

impl OodProtocolConfig {
    fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Domain(format!(
                "holdout_fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.n_repeats == 0 {
            return Err(Error::Domain("n_repeats must be positive".into()));
        }
        if self.alpha_grid.is_empty()
            || self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a))
            || self.alpha_grid.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Domain("alpha_grid must be sorted values in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The `(1 − α)` quantile of `scores`, interpolating linearly between order
/// statistics.
pub fn fit_threshold(holdout_scores: &[f64], alpha: f64) -> Result<f64> {
    if holdout_scores.is_empty() {
        return Err(Error::Domain("holdout scores are empty".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut s = holdout_scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(sorted_quantile(&s, 1.0 - alpha))
}

fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation, so a single value has `std = 0`.
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatMetrics {
    /// From the α sweep.
    pub auroc: f64,
    pub aupr: f64,
    pub fpr80: f64,
    /// Rank-statistic AUROC on the same scores, for comparison with the sweep.
    pub ranked_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub auroc: MeanStd,
    pub aupr: MeanStd,
    pub fpr80: MeanStd,
    pub n_repeats: usize,
    #[serde(skip)]
    pub repeats: Vec<RepeatMetrics>,
    #[serde(skip)]
    pub mean_id_score: f64,
    #[serde(skip)]
    pub mean_ood_score: f64,
}

/// Total mixture variance at every row of `x`.
pub fn ensemble_scores(ens: &Ensemble, x: ndarray::ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(ens.decompose(x)?.into_iter().map(|d| d.total_var).collect())
}

fn run_repeat(id_scores: &[f64], ood_scores: &[f64], cfg: &OodProtocolConfig, r: usize) -> Result<RepeatMetrics> {
    let n = id_scores.len();
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut holdout: Vec<f64> = idx[..n_hold].iter().map(|&i| id_scores[i]).collect();
    holdout.sort_by(f64::total_cmp);
    let rest: Vec<f64> = idx[n_hold..].iter().map(|&i| id_scores[i]).collect();

    let n_rest = rest.len() as f64;
    let n_ood = ood_scores.len() as f64;
    let points: Vec<OperatingPoint> = cfg
        .alpha_grid
        .iter()
        .map(|&alpha| {
            let tau = sorted_quantile(&holdout, 1.0 - alpha);
            let fp = rest.iter().filter(|&&s| s > tau).count() as f64;
            let tp = ood_scores.iter().filter(|&&s| s > tau).count() as f64;
            OperatingPoint {
                fpr: fp / n_rest,
                tpr: tp / n_ood,
                precision: if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 },
            }
        })
        .collect();
    let swept = operating_point_metrics(&points)?;
    let ranked = ood_curve_metrics(&OodScores::new(rest, ood_scores.to_vec())?);
    Ok(RepeatMetrics {
        auroc: swept.auroc,
        aupr: swept.aupr,
        fpr80: swept.fpr80,
        ranked_auroc: ranked.auroc,
    })
}

/// The protocol on precomputed scores.
pub fn run_ood_eval_scores(
    id_scores: &[f64],
    ood_scores: &[f64],
    cfg: &OodProtocolConfig,
) -> Result<OodReport> {
    cfg.validate()?;
    if ood_scores.is_empty() {
        return Err(Error::Domain("OOD set is empty".into()));
    }
    if id_scores.len() < 2 {
        return Err(Error::Domain("ID test set needs at least two inputs".into()));
    }
    let repeats = exec::collect_results(exec::map_range(cfg.n_repeats, |r| {
        run_repeat(id_scores, ood_scores, cfg, r)
    }))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(OodReport {
        auroc: MeanStd::of(repeats.iter().map(|r| r.auroc)),
        aupr: MeanStd::of(repeats.iter().map(|r| r.aupr)),
        fpr80: MeanStd::of(repeats.iter().map(|r| r.fpr80)),
        n_repeats: cfg.n_repeats,
        repeats,
        mean_id_score: mean(id_scores),
        mean_ood_score: mean(ood_scores),
    })
}

/// Score both sets by total ensemble variance and run the protocol.
pub fn run_ood_eval(
    ens: &Ensemble,
    id_test: &Dataset,
    ood_set: &Dataset,
    cfg: &OodProtocolConfig,
) -> Result<OodReport> {
    if ood_set.is_empty() {
        return Err(Error::Domain("OOD set is empty".into()));
    }
    let id_scores = ensemble_scores(ens, id_test.x.view())?;
    let ood_scores = ensemble_scores(ens, ood_set.x.view())?;
    run_ood_eval_scores(&id_scores, &ood_scores, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn threshold_levels() {
        let s = [3.0, 1.0, 4.0, 2.0];
        assert_eq!(fit_threshold(&s, 0.0).unwrap(), 4.0);
        assert_eq!(fit_threshold(&s, 1.0).unwrap(), 1.0);
        assert_eq!(fit_threshold(&s, 0.5).unwrap(), 2.5);
        assert!(fit_threshold(&[], 0.5).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let t = fit_threshold(&[0.3, 9.0, 1.1, 4.4, 2.0], i as f64 / 20.0).unwrap();
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn identical_populations_are_indistinguishable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let id: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let ood: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
        let rep = run_ood_eval_scores(&id, &ood, &OodProtocolConfig::default()).unwrap();
        assert!((rep.auroc.mean - 0.5).abs() < 0.1, "{rep:?}");
        for r in &rep.repeats {
            assert!((r.auroc - r.ranked_auroc).abs() < 0.01);
        }
    }

    #[test]
    fn single_repeat_has_zero_std_and_is_reproducible() {
        let id: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let ood: Vec<f64> = (0..20).map(|i| 30.0 + i as f64).collect();
        let cfg = OodProtocolConfig {
            n_repeats: 1,
            ..Default::default()
        };
        let a = run_ood_eval_scores(&id, &ood, &cfg).unwrap();
        assert_eq!(a.auroc.std, 0.0);
        assert_eq!(a, run_ood_eval_scores(&id, &ood, &cfg).unwrap());
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.starts_with(r#"{"auroc":{"mean":"#) && json.ends_with(r#""n_repeats":1}"#));
        assert!(run_ood_eval_scores(&id, &[], &cfg).is_err());
    }
}
