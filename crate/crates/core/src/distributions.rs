//! Predictive distribution families.
//!
//! Every prediction in the crate is a [`PredictiveDistribution`]: a Double
//! Poisson, Poisson, Negative Binomial, Gaussian, or a uniform mixture of
//! those. Discrete families are evaluated on a truncated support
//! ([`SupportTruncation`]) and all PMF arithmetic runs in log space, since
//! `γ·μ` easily exceeds the range where `exp` is representable.
//!
//! The Double Poisson PMF is
//!
//! ```text
//! p(y | μ, γ) = γ^½ e^{-γμ} / c(μ, γ) · (e^{-y} y^y / y!) · (eμ / y)^{γy}
//! ```
//!
//! with the conventions `0^0 = 1` and `y log y = 0` at `y = 0`. The
//! normalizing constant `c` is computed by a truncated series; passing
//! `normalized = false` to [`PredictiveDistribution::pmf`] uses `c = 1`.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::ensemble::mixture_moments;
use crate::error::{Error, Result};

/// How far to walk the support of a discrete family before stopping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportTruncation {
    /// Stop once a past-the-mode term is below this fraction of the running sum.
    pub tail_mass_tol: f64,
    /// Largest support value ever evaluated (inclusive).
    pub hard_cap: u64,
}

impl Default for SupportTruncation {
    fn default() -> Self {
        Self {
            tail_mass_tol: 1e-10,
            hard_cap: 10_000,
        }
    }
}

impl SupportTruncation {
    pub fn new(tail_mass_tol: f64, hard_cap: u64) -> Result<Self> {
        if !(tail_mass_tol > 0.0 && tail_mass_tol < 1.0) {
            return Err(Error::Domain(format!(
                "tail_mass_tol must lie in (0, 1), got {tail_mass_tol}"
            )));
        }
        if hard_cap < 1 {
            return Err(Error::Domain("hard_cap must be at least 1".into()));
        }
        Ok(Self {
            tail_mass_tol,
            hard_cap,
        })
    }
}

/// Double Poisson parameters: mean `mu` and inverse dispersion `gamma = 1/φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoublePoissonParams {
    pub mu: f64,
    pub gamma: f64,
}

impl DoublePoissonParams {
    pub fn new(mu: f64, gamma: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) || !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(format!(
                "Double Poisson requires mu > 0 and gamma > 0, got ({mu}, {gamma})"
            )));
        }
        Ok(Self { mu, gamma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    pub lambda: f64,
}

impl PoissonParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("Poisson requires lambda > 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// Negative Binomial in the `(r, p)` parametrization: the number of failures
/// before the `r`-th success, so the mean is `r(1-p)/p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegBinomialParams {
    pub r: f64,
    pub p: f64,
}

impl NegBinomialParams {
    pub fn new(r: f64, p: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) || !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!(
                "Negative Binomial requires r > 0 and 0 < p < 1, got ({r}, {p})"
            )));
        }
        Ok(Self { r, p })
    }

    /// Build from mean `m` and dispersion `alpha`, where variance is `m + alpha m^2`.
    pub fn from_mean_dispersion(mean: f64, alpha: f64) -> Result<Self> {
        if !(mean > 0.0 && mean.is_finite()) || !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Domain(format!(
                "Negative Binomial requires mean > 0 and dispersion > 0, got ({mean}, {alpha})"
            )));
        }
        let r = 1.0 / alpha;
        let p = 1.0 / (1.0 + alpha * mean);
        Self::new(r, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: f64,
    pub sigma2: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Domain(format!(
                "Gaussian requires finite mu and sigma2 > 0, got ({mu}, {sigma2})"
            )));
        }
        Ok(Self { mu, sigma2 })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// Uniform mixture of non-mixture components, all discrete or all Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    components: Vec<PredictiveDistribution>,
}

impl Mixture {
    pub fn new(components: Vec<PredictiveDistribution>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        if components.iter().any(|c| matches!(c, PredictiveDistribution::Mixture(_))) {
            return Err(Error::Domain("mixture components cannot be mixtures".into()));
        }
        let discrete = components[0].is_discrete();
        if components.iter().any(|c| c.is_discrete() != discrete) {
            return Err(Error::Domain(
                "mixture components must be all discrete or all continuous".into(),
            ));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[PredictiveDistribution] {
        &self.components
    }
}

/// Which moments to report for a Double Poisson.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMode {
    /// Mean `μ` and variance `μ/γ`.
    EfronApprox,
    /// Moments of the normalized PMF over the truncated support.
    ExactSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

/// The universal prediction object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum PredictiveDistribution {
    DoublePoisson(DoublePoissonParams),
    Poisson(PoissonParams),
    NegBinomial(NegBinomialParams),
    Gaussian(GaussianParams),
    Mixture(Mixture),
}

// ---------------------------------------------------------------------------
// log-space helpers

const LN_FACTORIAL_TABLE_LEN: usize = 10_002;

/// `ln(y!)`, tabulated by exact cumulative summation up to the default cap.
pub fn ln_factorial(y: u64) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(LN_FACTORIAL_TABLE_LEN);
        let mut acc = 0.0f64;
        t.push(0.0);
        for k in 1..LN_FACTORIAL_TABLE_LEN {
            acc += (k as f64).ln();
            t.push(acc);
        }
        t
    });
    match table.get(y as usize) {
        Some(v) => *v,
        None => ln_gamma(y as f64 + 1.0),
    }
}

/// `y log y` with the `0 log 0 = 0` convention.
#[inline]
pub fn xlogx(y: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y * y.ln()
    }
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogSumExp {
    max: f64,
    scaled: f64,
}

impl LogSumExp {
    pub(crate) fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }

    pub(crate) fn add(&mut self, log_term: f64) {
        if log_term == f64::NEG_INFINITY {
            return;
        }
        if log_term > self.max {
            self.scaled = self.scaled * (self.max - log_term).exp() + 1.0;
            self.max = log_term;
        } else {
            self.scaled += (log_term - self.max).exp();
        }
    }

    pub(crate) fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }
}

/// Log of the unnormalized Double Poisson term `γ^½ h(y) exp(r(μ, γ, y))`.
pub fn dp_log_term(mu: f64, gamma: f64, y: u64) -> f64 {
    let yf = y as f64;
    let ln_h = -yf + xlogx(yf) - ln_factorial(y);
    let r = gamma * (yf - mu + yf * mu.ln() - xlogx(yf));
    0.5 * gamma.ln() + ln_h + r
}

/// Walk the support from zero, collecting log terms until the tail is negligible.
///
/// Stops at the first `y >= center` whose term is non-increasing and below
/// `tail_mass_tol` times the running sum, or at `hard_cap`.
fn truncated_log_terms(
    center: f64,
    trunc: &SupportTruncation,
    mut log_term: impl FnMut(u64) -> f64,
) -> Result<(Vec<f64>, f64)> {
    let ln_tol = trunc.tail_mass_tol.ln();
    let mut terms = Vec::new();
    let mut acc = LogSumExp::new();
    let mut prev = f64::INFINITY;
    for y in 0..=trunc.hard_cap {
        let lt = log_term(y);
        if lt.is_nan() || lt == f64::INFINITY {
            return Err(Error::NumericOverflow(format!(
                "non-finite log term at y = {y} (center {center})"
            )));
        }
        acc.add(lt);
        terms.push(lt);
        if y as f64 >= center && lt <= prev && lt - acc.value() < ln_tol {
            break;
        }
        prev = lt;
    }
    let total = acc.value();
    if !total.is_finite() {
        return Err(Error::NumericOverflow(format!(
            "series sum is not finite (center {center})"
        )));
    }
    Ok((terms, total))
}

/// Normalizing constant `c(μ, γ)` of the Double Poisson as a truncated series.
pub fn dp_normalizer(params: DoublePoissonParams, trunc: &SupportTruncation) -> Result<f64> {
    let ln_c = dp_log_normalizer(params, trunc)?;
    let c = ln_c.exp();
    if !c.is_finite() || c == 0.0 {
        return Err(Error::NumericOverflow(format!(
            "normalizer exp({ln_c}) not representable for mu = {}, gamma = {}",
            params.mu, params.gamma
        )));
    }
    Ok(c)
}

pub fn dp_log_normalizer(params: DoublePoissonParams, trunc: &SupportTruncation) -> Result<f64> {
    let (_, total) =
        truncated_log_terms(params.mu, trunc, |y| dp_log_term(params.mu, params.gamma, y))?;
    Ok(total)
}

// ---------------------------------------------------------------------------
// support tables

/// PMF values of a discrete distribution over `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportTable {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl SupportTable {
    fn from_pmf(pmf: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc.min(1.0)
            })
            .collect();
        Self { pmf, cdf }
    }

    fn from_log_terms(terms: &[f64], log_norm: f64) -> Self {
        Self::from_pmf(terms.iter().map(|lt| (lt - log_norm).exp()).collect())
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.cdf.last().copied().unwrap_or(0.0)
    }

    /// `P(Y <= y)` for real `y`.
    pub fn cdf(&self, y: f64) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        let k = y.floor();
        if k >= self.cdf.len() as f64 {
            return self.total_mass();
        }
        self.cdf[k as usize]
    }

    /// Smallest support value attaining the maximum PMF (relative tie tolerance 1e-12).
    pub fn mode(&self) -> u64 {
        let max = self.pmf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cut = max * (1.0 - 1e-12);
        self.pmf.iter().position(|&p| p >= cut).unwrap_or(0) as u64
    }

    pub fn moments(&self) -> Moments {
        let total = self.total_mass();
        let mean = self
            .pmf
            .iter()
            .enumerate()
            .map(|(y, p)| y as f64 * p)
            .sum::<f64>()
            / total;
        let variance = self
            .pmf
            .iter()
            .enumerate()
            .map(|(y, p)| (y as f64 - mean).powi(2) * p)
            .sum::<f64>()
            / total;
        Moments { mean, variance }
    }

    /// Smallest `k` with `P(Y <= k) >= q`.
    pub fn quantile(&self, q: f64) -> u64 {
        let target = q * self.total_mass();
        self.cdf.partition_point(|&c| c < target).min(self.cdf.len() - 1) as u64
    }

    /// Inverse-CDF draw from a uniform variate in `[0, 1)`.
    pub fn inverse_cdf(&self, u: f64) -> u64 {
        let target = u * self.total_mass();
        self.cdf.partition_point(|&c| c <= target).min(self.cdf.len() - 1) as u64
    }

    /// Uniform average of several tables, padding shorter ones with zeros.
    fn average(tables: &[SupportTable]) -> Self {
        let len = tables.iter().map(SupportTable::len).max().unwrap_or(0);
        let m = tables.len() as f64;
        let mut pmf = vec![0.0; len];
        for t in tables {
            for (acc, p) in pmf.iter_mut().zip(&t.pmf) {
                *acc += p;
            }
        }
        for p in &mut pmf {
            *p /= m;
        }
        Self::from_pmf(pmf)
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn gaussian_density(params: &GaussianParams, y: f64) -> f64 {
    let z = (y - params.mu) / params.sigma();
    (-0.5 * z * z).exp() / (params.sigma() * (2.0 * std::f64::consts::PI).sqrt())
}

fn as_count(y: f64) -> Result<u64> {
    if y < 0.0 || y.fract() != 0.0 || !y.is_finite() {
        return Err(Error::Domain(format!(
            "discrete families need a non-negative integer, got {y}"
        )));
    }
    Ok(y as u64)
}

impl PredictiveDistribution {
    pub fn double_poisson(mu: f64, gamma: f64) -> Result<Self> {
        Ok(Self::DoublePoisson(DoublePoissonParams::new(mu, gamma)?))
    }

    pub fn poisson(lambda: f64) -> Result<Self> {
        Ok(Self::Poisson(PoissonParams::new(lambda)?))
    }

    pub fn neg_binomial(r: f64, p: f64) -> Result<Self> {
        Ok(Self::NegBinomial(NegBinomialParams::new(r, p)?))
    }

    pub fn gaussian(mu: f64, sigma2: f64) -> Result<Self> {
        Ok(Self::Gaussian(GaussianParams::new(mu, sigma2)?))
    }

    pub fn mixture(components: Vec<PredictiveDistribution>) -> Result<Self> {
        Ok(Self::Mixture(Mixture::new(components)?))
    }

    pub fn is_discrete(&self) -> bool {
        match self {
            Self::Gaussian(_) => false,
            Self::Mixture(m) => m.components[0].is_discrete(),
            _ => true,
        }
    }

    /// Truncated PMF table; Double Poisson terms are normalized by the series `c`.
    pub fn support_table(&self, trunc: &SupportTruncation) -> Result<SupportTable> {
        match self {
            Self::DoublePoisson(p) => {
                let (terms, total) =
                    truncated_log_terms(p.mu, trunc, |y| dp_log_term(p.mu, p.gamma, y))?;
                Ok(SupportTable::from_log_terms(&terms, total))
            }
            Self::Poisson(p) => {
                let ln_lambda = p.lambda.ln();
                let (terms, _) = truncated_log_terms(p.lambda, trunc, |y| {
                    y as f64 * ln_lambda - p.lambda - ln_factorial(y)
                })?;
                Ok(SupportTable::from_log_terms(&terms, 0.0))
            }
            Self::NegBinomial(p) => {
                let mean = p.r * (1.0 - p.p) / p.p;
                let ln_q = (-p.p).ln_1p();
                let mut current = p.r * p.p.ln();
                let (terms, _) = truncated_log_terms(mean, trunc, |y| {
                    if y > 0 {
                        let k = (y - 1) as f64;
                        current += (k + p.r).ln() - (k + 1.0).ln() + ln_q;
                    }
                    current
                })?;
                Ok(SupportTable::from_log_terms(&terms, 0.0))
            }
            Self::Gaussian(_) => Err(Error::Usage(
                "Gaussian distributions have no discrete support table".into(),
            )),
            Self::Mixture(m) => {
                let tables = m
                    .components
                    .iter()
                    .map(|c| c.support_table(trunc))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SupportTable::average(&tables))
            }
        }
    }

    /// PMF (density for Gaussian kinds) at `y`.
    ///
    /// `normalized = false` drops the Double Poisson series normalizer (`c = 1`);
    /// it has no effect on the other families, whose PMFs are exact.
    pub fn pmf(&self, y: f64, normalized: bool) -> Result<f64> {
        self.pmf_with(y, normalized, &SupportTruncation::default())
    }

    pub fn pmf_with(&self, y: f64, normalized: bool, trunc: &SupportTruncation) -> Result<f64> {
        match self {
            Self::DoublePoisson(p) => {
                let k = as_count(y)?;
                let ln_c = if normalized {
                    dp_log_normalizer(*p, trunc)?
                } else {
                    0.0
                };
                Ok((dp_log_term(p.mu, p.gamma, k) - ln_c).exp())
            }
            Self::Poisson(p) => {
                let k = as_count(y)?;
                Ok((k as f64 * p.lambda.ln() - p.lambda - ln_factorial(k)).exp())
            }
            Self::NegBinomial(p) => {
                let k = as_count(y)?;
                let kf = k as f64;
                let ln_pmf = ln_gamma(kf + p.r) - ln_gamma(p.r) - ln_factorial(k)
                    + p.r * p.p.ln()
                    + kf * (-p.p).ln_1p();
                Ok(ln_pmf.exp())
            }
            Self::Gaussian(p) => Ok(gaussian_density(p, y)),
            Self::Mixture(m) => {
                let mut acc = 0.0;
                for c in &m.components {
                    acc += c.pmf_with(y, normalized, trunc)?;
                }
                Ok(acc / m.components.len() as f64)
            }
        }
    }

    /// Predictive CDF `P(Y <= y)`.
    pub fn cdf(&self, y: f64) -> Result<f64> {
        match self {
            Self::Gaussian(p) => Ok(std_normal_cdf((y - p.mu) / p.sigma())),
            Self::Mixture(m) if !self.is_discrete() => {
                let mut acc = 0.0;
                for c in &m.components {
                    acc += c.cdf(y)?;
                }
                Ok(acc / m.components.len() as f64)
            }
            _ => {
                if y < 0.0 {
                    return Ok(0.0);
                }
                Ok(self.support_table(&SupportTruncation::default())?.cdf(y))
            }
        }
    }

    pub fn moments(&self, mode: MomentMode) -> Result<Moments> {
        match self {
            Self::DoublePoisson(p) => match mode {
                MomentMode::EfronApprox => Ok(Moments {
                    mean: p.mu,
                    variance: p.mu / p.gamma,
                }),
                MomentMode::ExactSeries => {
                    Ok(self.support_table(&SupportTruncation::default())?.moments())
                }
            },
            Self::Poisson(p) => Ok(Moments {
                mean: p.lambda,
                variance: p.lambda,
            }),
            Self::NegBinomial(p) => {
                let mean = p.r * (1.0 - p.p) / p.p;
                Ok(Moments {
                    mean,
                    variance: mean / p.p,
                })
            }
            Self::Gaussian(p) => Ok(Moments {
                mean: p.mu,
                variance: p.sigma2,
            }),
            Self::Mixture(m) => {
                let parts = m
                    .components
                    .iter()
                    .map(|c| c.moments(mode))
                    .collect::<Result<Vec<_>>>()?;
                let means: Vec<f64> = parts.iter().map(|m| m.mean).collect();
                let vars: Vec<f64> = parts.iter().map(|m| m.variance).collect();
                let (mean, variance) = mixture_moments(&means, &vars)?;
                Ok(Moments { mean, variance })
            }
        }
    }

    /// Mode of the (mixture-averaged) PMF; Gaussian modes are continuous.
    pub fn mode(&self, trunc: &SupportTruncation) -> Result<f64> {
        match self {
            Self::Gaussian(p) => Ok(p.mu),
            Self::Mixture(m) if !self.is_discrete() => Ok(gaussian_mixture_mode(m)),
            _ => Ok(self.support_table(trunc)?.mode() as f64),
        }
    }

    /// Smallest value whose CDF reaches `q`; bisection for Gaussian mixtures.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Domain(format!("quantile level must lie in [0, 1], got {q}")));
        }
        match self {
            Self::Gaussian(p) => {
                let n = StatrsNormal::new(p.mu, p.sigma())
                    .map_err(|e| Error::Domain(e.to_string()))?;
                Ok(n.inverse_cdf(q))
            }
            Self::Mixture(m) if !self.is_discrete() => {
                let comps: Vec<GaussianParams> = gaussian_components(m);
                let lo0 = comps
                    .iter()
                    .map(|c| c.mu - 40.0 * c.sigma())
                    .fold(f64::INFINITY, f64::min);
                let hi0 = comps
                    .iter()
                    .map(|c| c.mu + 40.0 * c.sigma())
                    .fold(f64::NEG_INFINITY, f64::max);
                let (mut lo, mut hi) = (lo0, hi0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid)? < q {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(hi)
            }
            _ => Ok(self.support_table(&SupportTruncation::default())?.quantile(q) as f64),
        }
    }

    /// Draw `n` values; discrete kinds use inverse-CDF on the truncated table.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::Domain("sample count must be at least 1".into()));
        }
        match self {
            Self::Gaussian(p) => {
                let normal =
                    Normal::new(p.mu, p.sigma()).map_err(|e| Error::Domain(e.to_string()))?;
                Ok((0..n).map(|_| normal.sample(rng)).collect())
            }
            Self::Mixture(m) if !self.is_discrete() => {
                let comps = gaussian_components(m);
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    let c = &comps[rng.random_range(0..comps.len())];
                    let normal = Normal::new(c.mu, c.sigma())
                        .map_err(|e| Error::Domain(e.to_string()))?;
                    out.push(normal.sample(rng));
                }
                Ok(out)
            }
            _ => {
                let table = self.support_table(&SupportTruncation::default())?;
                Ok((0..n)
                    .map(|_| table.inverse_cdf(rng.random::<f64>()) as f64)
                    .collect())
            }
        }
    }
}

fn gaussian_components(m: &Mixture) -> Vec<GaussianParams> {
    m.components
        .iter()
        .filter_map(|c| match c {
            PredictiveDistribution::Gaussian(g) => Some(*g),
            _ => None,
        })
        .collect()
}

/// Highest-density point of a Gaussian mixture via mean-shift from every
/// component mean.
fn gaussian_mixture_mode(m: &Mixture) -> f64 {
    let comps = gaussian_components(m);
    let density = |x: f64| comps.iter().map(|c| gaussian_density(c, x)).sum::<f64>();
    let mut best = comps[0].mu;
    let mut best_density = f64::NEG_INFINITY;
    for start in comps.iter().map(|c| c.mu) {
        let mut x = start;
        for _ in 0..500 {
            let (mut num, mut den) = (0.0, 0.0);
            for c in &comps {
                let w = gaussian_density(c, x) / c.sigma2;
                num += w * c.mu;
                den += w;
            }
            if den == 0.0 {
                break;
            }
            let next = num / den;
            if (next - x).abs() <= 1e-12 * (1.0 + x.abs()) {
                x = next;
                break;
            }
            x = next;
        }
        let d = density(x);
        if d > best_density {
            best_density = d;
            best = x;
        }
    }
    best
}
