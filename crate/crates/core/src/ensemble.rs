//! Deep ensembles: a uniform mixture of independently trained networks.
//!
//! For member predictive means `μ_m` and variances `σ²_m`, the mixture has
//! mean `Σμ_m/M` and variance `Σ(σ²_m + μ²_m)/M − (Σμ_m/M)²`, which splits
//! into the mean member variance (aleatoric) plus the population variance
//! of the member means (epistemic).

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::distributions::{MomentMode, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::Family;
use crate::network::{train, MlpConfig, MlpModel, TrainConfig, TrainReport};

pub const MANIFEST_MAGIC: &str = "ddpnkit-ensemble v1";

fn check_lists(means: &[f64], vars: &[f64]) -> Result<()> {
    if means.is_empty() {
        return Err(Error::Domain("at least one member is required".into()));
    }
    if means.len() != vars.len() {
        return Err(Error::Shape {
            expected: means.len(),
            got: vars.len(),
        });
    }
    Ok(())
}

/// `(mean, variance)` of the uniform mixture with the given member moments.
pub fn mixture_moments(means: &[f64], vars: &[f64]) -> Result<(f64, f64)> {
    check_lists(means, vars)?;
    let m = means.len() as f64;
    let mean = means.iter().sum::<f64>() / m;
    let second = means
        .iter()
        .zip(vars)
        .map(|(mu, v)| v + mu * mu)
        .sum::<f64>()
        / m;
    Ok((mean, (second - mean * mean).max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDecomposition {
    pub total_var: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

pub fn decompose_variance(means: &[f64], vars: &[f64]) -> Result<UncertaintyDecomposition> {
    check_lists(means, vars)?;
    let m = means.len() as f64;
    let mean = means.iter().sum::<f64>() / m;
    let aleatoric = vars.iter().sum::<f64>() / m;
    let epistemic = means.iter().map(|mu| (mu - mean) * (mu - mean)).sum::<f64>() / m;
    Ok(UncertaintyDecomposition {
        total_var: aleatoric + epistemic,
        aleatoric,
        epistemic,
    })
}

/// Per-input summary used for plotting and OOD scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub mean: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub total_var: f64,
    /// Equal-tailed 95% interval from the mixture CDF.
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<MlpModel>,
    /// Moments used for member variances (Efron's approximation by default).
    pub moment_mode: MomentMode,
}

impl Ensemble {
    pub fn new(members: Vec<MlpModel>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Domain("an ensemble needs at least one member".into()));
        };
        let family = first.family();
        let dim = first.config.input_dim;
        for m in &members {
            if m.family() != family {
                return Err(Error::Usage(format!(
                    "mixed families in ensemble: {family} and {}",
                    m.family()
                )));
            }
            if m.config.input_dim != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: m.config.input_dim,
                });
            }
        }
        Ok(Self {
            members,
            moment_mode: MomentMode::EfronApprox,
        })
    }

    pub fn members(&self) -> &[MlpModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn family(&self) -> Family {
        self.members[0].family()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].config.input_dim
    }

    /// Uniform mixture of the member predictions at `x`.
    pub fn mixture_predict(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        let comps = self
            .members
            .iter()
            .map(|m| m.predict_distribution(x))
            .collect::<Result<Vec<_>>>()?;
        PredictiveDistribution::mixture(comps)
    }

    /// Member distributions for every row of `x`, indexed `[row][member]`.
    pub fn member_distributions(
        &self,
        x: ArrayView2<f64>,
    ) -> Result<Vec<Vec<PredictiveDistribution>>> {
        let per_member = self
            .members
            .iter()
            .map(|m| m.predict_distributions(x))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..x.nrows())
            .map(|i| per_member.iter().map(|d| d[i].clone()).collect())
            .collect())
    }

    pub fn mixture_predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<PredictiveDistribution>> {
        self.member_distributions(x)?
            .into_iter()
            .map(PredictiveDistribution::mixture)
            .collect()
    }

    fn decompose_members(&self, comps: &[PredictiveDistribution]) -> Result<UncertaintyDecomposition> {
        let moments = comps
            .iter()
            .map(|c| c.moments(self.moment_mode))
            .collect::<Result<Vec<_>>>()?;
        let means: Vec<f64> = moments.iter().map(|m| m.mean).collect();
        let vars: Vec<f64> = moments.iter().map(|m| m.variance).collect();
        decompose_variance(&means, &vars)
    }

    /// Aleatoric/epistemic split at every row of `x`.
    pub fn decompose(&self, x: ArrayView2<f64>) -> Result<Vec<UncertaintyDecomposition>> {
        let rows = self.member_distributions(x)?;
        exec::collect_results(exec::map(&rows, |comps| self.decompose_members(comps)))
    }

    /// Mean, variance split and equal-tailed 95% interval at every row of `x`.
    pub fn summarize(&self, x: ArrayView2<f64>) -> Result<Vec<PointSummary>> {
        let rows = self.member_distributions(x)?;
        exec::collect_results(exec::map(&rows, |comps| {
            let moments = comps
                .iter()
                .map(|c| c.moments(self.moment_mode))
                .collect::<Result<Vec<_>>>()?;
            let means: Vec<f64> = moments.iter().map(|m| m.mean).collect();
            let vars: Vec<f64> = moments.iter().map(|m| m.variance).collect();
            let dec = decompose_variance(&means, &vars)?;
            // the total comes from the mixture's own second moment, so the
            // split can be checked against it
            let (mean, total_var) = mixture_moments(&means, &vars)?;
            let mix = PredictiveDistribution::mixture(comps.clone())?;
            Ok(PointSummary {
                mean,
                aleatoric: dec.aleatoric,
                epistemic: dec.epistemic,
                total_var,
                q025: mix.quantile(0.025)?,
                q975: mix.quantile(0.975)?,
            })
        }))
    }

    /// Manifest text for a manifest stored at `path`; checkpoint paths are
    /// written relative to its directory where possible.
    pub fn manifest_text(path: &Path, family: Family, checkpoints: &[PathBuf]) -> String {
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut out = format!("{MANIFEST_MAGIC}\nfamily={family}\n");
        for ckpt in checkpoints {
            let rel = ckpt.strip_prefix(base).unwrap_or(ckpt);
            out.push_str(&format!("{}\n", rel.display()));
        }
        out
    }

    pub fn write_manifest(path: &Path, family: Family, checkpoints: &[PathBuf]) -> Result<()> {
        fs::write(path, Self::manifest_text(path, family, checkpoints))?;
        Ok(())
    }

    /// Load the members named in a manifest; relative paths resolve against
    /// the manifest's directory.
    pub fn load_manifest(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != MANIFEST_MAGIC {
            return Err(Error::Parse(format!(
                "{}: missing '{MANIFEST_MAGIC}' header",
                path.display()
            )));
        }
        let fam_line = lines.next().transpose()?.unwrap_or_default();
        let family: Family = fam_line
            .trim()
            .strip_prefix("family=")
            .ok_or_else(|| Error::Parse(format!("expected 'family=...', got '{fam_line}'")))?
            .parse()?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut members = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let ckpt = base.join(line);
            let model = MlpModel::read_checkpoint(BufReader::new(fs::File::open(&ckpt)?))?;
            if model.family() != family {
                return Err(Error::Parse(format!(
                    "{} holds a {} model, manifest says {family}",
                    ckpt.display(),
                    model.family()
                )));
            }
            members.push(model);
        }
        Self::new(members)
    }
}

/// Seeds of member `index`: both the initialization and shuffling seeds are
/// offset by the member index.
pub fn member_configs(mlp: &MlpConfig, cfg: &TrainConfig, index: usize) -> (MlpConfig, TrainConfig) {
    let mut mlp = mlp.clone();
    let mut cfg = cfg.clone();
    mlp.seed = mlp.seed.wrapping_add(index as u64);
    cfg.seed = cfg.seed.wrapping_add(index as u64);
    (mlp, cfg)
}

/// Train `m` members (concurrently with the `parallel` feature) and keep
/// each member's best-validation weights.
pub fn train_ensemble(
    train_set: &Dataset,
    val_set: &Dataset,
    mlp: &MlpConfig,
    cfg: &TrainConfig,
    m: usize,
) -> Result<(Ensemble, Vec<TrainReport>)> {
    if m == 0 {
        return Err(Error::Domain("ensemble size must be at least 1".into()));
    }
    let outcomes = exec::collect_results(exec::map_range(m, |i| {
        let (mlp_i, cfg_i) = member_configs(mlp, cfg, i);
        train(train_set, val_set, &mlp_i, &cfg_i)
    }))?;
    let mut members = Vec::with_capacity(m);
    let mut reports = Vec::with_capacity(m);
    for o in outcomes {
        members.push(o.best);
        reports.push(o.report);
    }
    Ok((Ensemble::new(members)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::SupportTruncation;
    use crate::losses::LossSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_member_example() {
        assert_eq!(mixture_moments(&[2.0, 4.0], &[2.0, 4.0]).unwrap(), (3.0, 4.0));
        let d = decompose_variance(&[2.0, 4.0], &[2.0, 4.0]).unwrap();
        assert_eq!((d.aleatoric, d.epistemic, d.total_var), (3.0, 1.0, 4.0));
        let (m, v) = mixture_moments(&[1.5], &[0.7]).unwrap();
        assert_eq!(m, 1.5);
        assert!((v - 0.7).abs() < 1e-15);
    }

    #[test]
    fn degenerate_splits() {
        let d = decompose_variance(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(d.epistemic, 0.0);
        let d = decompose_variance(&[1.0, 2.0, 6.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.aleatoric, 0.0);
        assert!((d.total_var - 14.0 / 3.0).abs() < 1e-12);
        assert!(mixture_moments(&[], &[]).is_err());
        assert!(mixture_moments(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn variance_matches_two_stage_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let means: [f64; 5] = [1.0, -2.0, 0.5, 3.0, 2.2];
        let vars: [f64; 5] = [0.3, 1.2, 2.0, 0.1, 0.9];
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        let normal = rand_distr::StandardNormal;
        for _ in 0..n {
            let k = rng.random_range(0..5);
            let z: f64 = rng.sample(normal);
            let v = means[k] + vars[k].sqrt() * z;
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let (_, exact) = mixture_moments(&means, &vars).unwrap();
        // SE of a sample variance ≈ sqrt((m4 − σ⁴)/n); bounded loosely by 3σ²·sqrt(2/n)
        let se = exact * (2.0 / n as f64).sqrt() * 2.0;
        assert!((var - exact).abs() < 3.0 * se, "{var} vs {exact}");
    }

    proptest! {
        #[test]
        fn additivity(
            members in proptest::collection::vec((-50.0f64..50.0, 0.0f64..100.0), 1..12)
        ) {
            let means: Vec<f64> = members.iter().map(|m| m.0).collect();
            let vars: Vec<f64> = members.iter().map(|m| m.1).collect();
            let d = decompose_variance(&means, &vars).unwrap();
            let (_, total) = mixture_moments(&means, &vars).unwrap();
            prop_assert!((d.total_var - d.aleatoric - d.epistemic).abs() < 1e-10);
            prop_assert!((d.total_var - total).abs() < 1e-9 * (1.0 + total));
        }
    }

    fn model(seed: u64) -> MlpModel {
        let cfg = MlpConfig::new(1, vec![6], Family::DoublePoisson, seed);
        MlpModel::new(cfg, LossSpec::new(Family::DoublePoisson, 0.0).unwrap()).unwrap()
    }

    #[test]
    fn mixture_of_identical_members_is_the_member() {
        let single = Ensemble::new(vec![model(3)]).unwrap();
        let pair = Ensemble::new(vec![model(3), model(3)]).unwrap();
        let member = single.members()[0].predict_distribution(&[0.4]).unwrap();
        let a = single.mixture_predict(&[0.4]).unwrap();
        let b = pair.mixture_predict(&[0.4]).unwrap();
        for y in 0..20 {
            let p = member.pmf(y as f64, true).unwrap();
            assert!((a.pmf(y as f64, true).unwrap() - p).abs() < 1e-15);
            assert!((b.pmf(y as f64, true).unwrap() - p).abs() < 1e-15);
        }
    }

    #[test]
    fn five_member_mixture_is_normalized_and_linear() {
        let ens = Ensemble::new((0..5).map(model).collect()).unwrap();
        let mix = ens.mixture_predict(&[1.3]).unwrap();
        let table = mix.support_table(&SupportTruncation::default()).unwrap();
        assert!((table.total_mass() - 1.0).abs() < 1e-8);
        let PredictiveDistribution::Mixture(m) = &mix else {
            panic!("expected a mixture")
        };
        for y in 0..15 {
            let avg = m
                .components()
                .iter()
                .map(|c| c.cdf(y as f64).unwrap())
                .sum::<f64>()
                / 5.0;
            assert!((mix.cdf(y as f64).unwrap() - avg).abs() < 1e-12);
        }
        let exact = mix.moments(MomentMode::ExactSeries).unwrap();
        assert!((exact.mean - table.moments().mean).abs() < 1e-8);
    }

    #[test]
    fn rejects_mixed_families() {
        let cfg = MlpConfig::new(1, vec![2], Family::Poisson, 0);
        let p = MlpModel::new(cfg, LossSpec::new(Family::Poisson, 0.0).unwrap()).unwrap();
        assert!(Ensemble::new(vec![model(0), p]).is_err());
        assert!(Ensemble::new(vec![]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for i in 0..2 {
            let p = dir.path().join(format!("m{i}.ckpt"));
            let mut buf = Vec::new();
            model(i).write_checkpoint(&mut buf).unwrap();
            fs::write(&p, buf).unwrap();
            paths.push(p);
        }
        let manifest = dir.path().join("ens.manifest");
        Ensemble::write_manifest(&manifest, Family::DoublePoisson, &paths).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        assert_eq!(text, "ddpnkit-ensemble v1\nfamily=double_poisson\nm0.ckpt\nm1.ckpt\n");
        let ens = Ensemble::load_manifest(&manifest).unwrap();
        assert_eq!(ens.len(), 2);
        assert_eq!(ens.members()[1], model(1));
    }
}
