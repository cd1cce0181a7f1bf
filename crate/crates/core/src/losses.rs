//! Training objectives and their analytic gradients.
//!
//! The Double Poisson objective drops the parameter-free `h(y)` term and
//! assumes `c(μ, γ) = 1`:
//!
//! ```text
//! L(y, μ̂, γ̂) = −½ log γ̂ + γ̂ μ̂ − γ̂ y (1 + log μ̂ − log y)
//! ```
//!
//! The β variant multiplies by `γ̂^{−β}`, which is treated as a constant when
//! differentiating. Here that stop-gradient is realized by evaluating the
//! scale as a plain number from the current `γ̂` and multiplying value and
//! gradients by it.
//!
//! Network heads emit log-space parameters, so [`head_loss`] returns
//! gradients with respect to `log μ̂` and `log γ̂` (or the family's
//! equivalents) with the link chain factor already applied.

use serde::{Deserialize, Serialize};

use crate::distributions::{xlogx, NegBinomialParams, PredictiveDistribution};
use crate::error::{Error, Result};

/// Output distribution family of a regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    DoublePoisson,
    Poisson,
    NegBinomial,
    Gaussian,
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::DoublePoisson => "double_poisson",
            Family::Poisson => "poisson",
            Family::NegBinomial => "neg_binomial",
            Family::Gaussian => "gaussian",
        }
    }

    /// Number of affine output heads.
    pub fn head_count(&self) -> usize {
        match self {
            Family::Poisson => 1,
            _ => 2,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, Family::Gaussian)
    }

    /// Predictive distribution described by a head output.
    pub fn distribution(&self, head: HeadOutput) -> Result<PredictiveDistribution> {
        match self {
            Family::DoublePoisson => {
                PredictiveDistribution::double_poisson(head.mean_head.exp(), head.disp()?.exp())
            }
            Family::Poisson => PredictiveDistribution::poisson(head.mean_head.exp()),
            Family::NegBinomial => Ok(PredictiveDistribution::NegBinomial(
                NegBinomialParams::from_mean_dispersion(head.mean_head.exp(), head.disp()?.exp())?,
            )),
            Family::Gaussian => {
                PredictiveDistribution::gaussian(head.mean_head, head.disp()?.exp())
            }
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double_poisson" | "double-poisson" | "dp" | "ddpn" => Ok(Family::DoublePoisson),
            "poisson" => Ok(Family::Poisson),
            "neg_binomial" | "neg-binomial" | "nb" | "negbin" => Ok(Family::NegBinomial),
            "gaussian" | "normal" => Ok(Family::Gaussian),
            other => Err(Error::Parse(format!("unknown family '{other}'"))),
        }
    }
}

/// Raw affine head outputs.
///
/// `mean_head` is `log μ̂` for count families and the mean itself for the
/// Gaussian. `disp_head` is `log γ̂` (Double Poisson), `log α` (Negative
/// Binomial dispersion), `log σ̂²` (Gaussian), or absent (Poisson).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    pub mean_head: f64,
    pub disp_head: Option<f64>,
}

impl HeadOutput {
    pub fn new(mean_head: f64, disp_head: Option<f64>) -> Self {
        Self {
            mean_head,
            disp_head,
        }
    }

    fn disp(&self) -> Result<f64> {
        self.disp_head
            .ok_or_else(|| Error::Usage("this family needs a dispersion head".into()))
    }
}

/// Loss family plus β.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub family: Family,
    pub beta: f64,
}

impl LossSpec {
    /// β must lie in `[0, 1]`; Poisson and Negative Binomial force it to zero.
    pub fn new(family: Family, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Domain(format!("beta must lie in [0, 1], got {beta}")));
        }
        let beta = match family {
            Family::Poisson | Family::NegBinomial => 0.0,
            _ => beta,
        };
        Ok(Self { family, beta })
    }
}

/// Per-example loss value and gradients with respect to the raw heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLoss {
    pub value: f64,
    /// Stop-gradient β factor already folded into `value` and the gradients.
    pub scale: f64,
    pub d_mean_head: f64,
    pub d_disp_head: Option<f64>,
}

/// Double Poisson NLL with `c = 1` and the `h(y)` term dropped.
pub fn ddpn_nll(y: f64, mu_hat: f64, gamma_hat: f64) -> f64 {
    -0.5 * gamma_hat.ln() + gamma_hat * mu_hat - gamma_hat * (y + y * mu_hat.ln() - xlogx(y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaNll {
    pub value: f64,
    pub scale: f64,
}

pub fn ddpn_beta_nll(y: f64, mu_hat: f64, gamma_hat: f64, beta: f64) -> BetaNll {
    let scale = gamma_hat.powf(-beta);
    BetaNll {
        value: scale * ddpn_nll(y, mu_hat, gamma_hat),
        scale,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdpnGrads {
    pub d_mu: f64,
    pub d_gamma: f64,
}

/// Partial derivatives of the β-NLL in `μ̂` and `γ̂` (scale held fixed).
pub fn ddpn_grads(y: f64, mu_hat: f64, gamma_hat: f64, beta: f64) -> DdpnGrads {
    let scale = gamma_hat.powf(-beta);
    DdpnGrads {
        d_mu: gamma_hat.powf(1.0 - beta) * (1.0 - y / mu_hat),
        d_gamma: -0.5 / gamma_hat.powf(1.0 + beta)
            + scale * (mu_hat - y - y * mu_hat.ln() + xlogx(y)),
    }
}

/// `d(φ) + a(φ)·r(μ̂, y)` split of the Double Poisson NLL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttenuationParts {
    /// Dispersion penalty `½ log φ`.
    pub d: f64,
    /// Attenuation factor `1/φ`.
    pub a: f64,
    /// Residual penalty `(μ̂ − y) − y(log μ̂ − log y)`.
    pub r: f64,
    pub phi: f64,
}

impl AttenuationParts {
    pub fn total(&self) -> f64 {
        self.d + self.a * self.r
    }
}

/// Residual penalty, evaluated as `y·(u − log(1 + u))` with `u = μ̂/y − 1`
/// so it stays non-negative near `μ̂ = y`.
pub fn residual_penalty(y: f64, mu_hat: f64) -> f64 {
    if y == 0.0 {
        return mu_hat;
    }
    let u = mu_hat / y - 1.0;
    (y * (u - u.ln_1p())).max(0.0)
}

pub fn attenuation_decompose(y: f64, mu_hat: f64, phi_hat: f64) -> Result<AttenuationParts> {
    if !(phi_hat > 0.0) || !(mu_hat > 0.0) || y < 0.0 {
        return Err(Error::Domain(format!(
            "attenuation needs mu_hat > 0, phi_hat > 0, y >= 0; got ({y}, {mu_hat}, {phi_hat})"
        )));
    }
    Ok(AttenuationParts {
        d: 0.5 * phi_hat.ln(),
        a: 1.0 / phi_hat,
        r: residual_penalty(y, mu_hat),
        phi: phi_hat,
    })
}

fn require_count(y: f64) -> Result<u64> {
    if y < 0.0 || y.fract() != 0.0 || !y.is_finite() {
        return Err(Error::Domain(format!(
            "count families need non-negative integer targets, got {y}"
        )));
    }
    Ok(y as u64)
}

/// `log(e^a + e^b)`.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Loss and head gradients for the Poisson, Negative Binomial and Gaussian baselines.
pub fn baseline_nll(spec: LossSpec, y: f64, head: HeadOutput) -> Result<HeadLoss> {
    match spec.family {
        Family::DoublePoisson => Err(Error::Usage(
            "baseline_nll does not cover the Double Poisson; use the ddpn losses".into(),
        )),
        Family::Poisson => {
            require_count(y)?;
            let log_lambda = head.mean_head;
            let lambda = log_lambda.exp();
            Ok(HeadLoss {
                value: lambda - y * log_lambda,
                scale: 1.0,
                d_mean_head: lambda - y,
                d_disp_head: None,
            })
        }
        Family::NegBinomial => {
            let count = require_count(y)?;
            let log_m = head.mean_head;
            let log_alpha = head.disp()?;
            let m = log_m.exp();
            let r = (-log_alpha).exp();
            let log_r_plus_m = log_add_exp(-log_alpha, log_m);
            // lnΓ(y + r) − lnΓ(r) and ψ(y + r) − ψ(r) as finite sums over integer y.
            let (mut lgamma_ratio, mut digamma_diff) = (0.0, 0.0);
            for k in 0..count {
                let t = r + k as f64;
                lgamma_ratio += t.ln();
                digamma_diff += 1.0 / t;
            }
            let ln1p_m_over_r = (m / r).ln_1p();
            let log_pmf = lgamma_ratio - r * ln1p_m_over_r + y * (log_m - log_r_plus_m);
            let d_mean = r * (m - y) / (r + m);
            let d_disp = r * (digamma_diff - ln1p_m_over_r + (m - y) / (r + m));
            Ok(HeadLoss {
                value: -log_pmf,
                scale: 1.0,
                d_mean_head: d_mean,
                d_disp_head: Some(d_disp),
            })
        }
        Family::Gaussian => {
            let mu = head.mean_head;
            let log_var = head.disp()?;
            let var = log_var.exp();
            let scale = (spec.beta * log_var).exp();
            let resid2 = (y - mu) * (y - mu);
            Ok(HeadLoss {
                value: scale * (0.5 * log_var + resid2 / (2.0 * var)),
                scale,
                d_mean_head: scale * (mu - y) / var,
                d_disp_head: Some(scale * (0.5 - resid2 / (2.0 * var))),
            })
        }
    }
}

/// Loss and head gradients for any family.
pub fn head_loss(spec: LossSpec, y: f64, head: HeadOutput) -> Result<HeadLoss> {
    match spec.family {
        Family::DoublePoisson => {
            require_count(y)?;
            let log_mu = head.mean_head;
            let log_gamma = head.disp()?;
            let mu = log_mu.exp();
            let gamma = log_gamma.exp();
            let scale = (-spec.beta * log_gamma).exp();
            let nll = -0.5 * log_gamma + gamma * (mu - y - y * log_mu + xlogx(y));
            Ok(HeadLoss {
                value: scale * nll,
                scale,
                // μ̂·∂L/∂μ̂ and γ̂·∂L/∂γ̂
                d_mean_head: scale * gamma * (mu - y),
                d_disp_head: Some(scale * (-0.5 + gamma * (mu - y - y * log_mu + xlogx(y)))),
            })
        }
        _ => baseline_nll(spec, y, head),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const NLL_4_2_HALF: f64 = 0.732_867_951_399_863_3;

    #[test]
    fn ddpn_nll_values() {
        assert_relative_eq!(ddpn_nll(3.0, 3.0, 1.0), 0.0, epsilon = 1e-14);
        assert_relative_eq!(ddpn_nll(0.0, 2.0, 1.0), 2.0, epsilon = 1e-15);
        assert_relative_eq!(ddpn_nll(4.0, 2.0, 0.5), NLL_4_2_HALF, epsilon = 1e-14);
    }

    #[test]
    fn beta_nll_values() {
        let b0 = ddpn_beta_nll(4.0, 2.0, 0.5, 0.0);
        assert_eq!(b0.value, ddpn_nll(4.0, 2.0, 0.5));
        let b1 = ddpn_beta_nll(4.0, 2.0, 0.5, 1.0);
        assert_relative_eq!(b1.scale, 2.0);
        assert_relative_eq!(b1.value, 2.0 * NLL_4_2_HALF, epsilon = 1e-14);
        let g1 = ddpn_beta_nll(4.0, 2.0, 1.0, 0.7);
        assert_eq!(g1.value, ddpn_nll(4.0, 2.0, 1.0));
    }

    #[test]
    fn ddpn_grad_values() {
        let g = ddpn_grads(4.0, 2.0, 0.5, 0.0);
        assert_relative_eq!(g.d_mu, -0.5, epsilon = 1e-15);
        assert_relative_eq!(g.d_gamma, -0.227_411_277_760_218_7, max_relative = 1e-12);
        let h = 1e-6;
        let fd = (ddpn_nll(4.0, 2.0, 0.5 + h) - ddpn_nll(4.0, 2.0, 0.5 - h)) / (2.0 * h);
        assert_relative_eq!(g.d_gamma, fd, max_relative = 1e-5);
        assert_eq!(ddpn_grads(3.0, 3.0, 7.0, 0.0).d_mu, 0.0);
    }

    #[test]
    fn attenuation_examples() {
        let p = attenuation_decompose(4.0, 4.0, 3.0).unwrap();
        assert_eq!(p.r, 0.0);
        assert_relative_eq!(p.d, 0.5 * 3.0f64.ln());
        assert_relative_eq!(p.a, 1.0 / 3.0);
        let p = attenuation_decompose(4.0, 2.0, 2.0).unwrap();
        assert_relative_eq!(p.r, 0.772_588_722_239_781_2, max_relative = 1e-12);
        assert_relative_eq!(p.total(), NLL_4_2_HALF, epsilon = 1e-14);
        assert_eq!(attenuation_decompose(0.0, 5.0, 1.0).unwrap().r, 5.0);
        assert!(attenuation_decompose(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn baseline_values() {
        let g = LossSpec::new(Family::Gaussian, 0.0).unwrap();
        let v = baseline_nll(g, 1.5, HeadOutput::new(1.5, Some(0.0))).unwrap();
        assert_eq!(v.value, 0.0);
        let p = LossSpec::new(Family::Poisson, 0.0).unwrap();
        let v = baseline_nll(p, 2.0, HeadOutput::new(2.0f64.ln(), None)).unwrap();
        assert_relative_eq!(v.value, 2.0 - 2.0 * 2.0f64.ln(), epsilon = 1e-15);
        let dp = LossSpec::new(Family::DoublePoisson, 0.0).unwrap();
        assert!(matches!(
            baseline_nll(dp, 1.0, HeadOutput::new(0.0, Some(0.0))),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn loss_spec_validation() {
        assert!(LossSpec::new(Family::DoublePoisson, 1.5).is_err());
        assert_eq!(LossSpec::new(Family::NegBinomial, 0.5).unwrap().beta, 0.0);
    }

    #[test]
    fn nb_value_matches_log_pmf() {
        // value + ln y! is the full negative log-PMF
        let (m, alpha) = (3.0f64, 0.4f64);
        let spec = LossSpec::new(Family::NegBinomial, 0.0).unwrap();
        let dist = PredictiveDistribution::NegBinomial(
            NegBinomialParams::from_mean_dispersion(m, alpha).unwrap(),
        );
        for y in 0..12u64 {
            let v = baseline_nll(spec, y as f64, HeadOutput::new(m.ln(), Some(alpha.ln())))
                .unwrap()
                .value;
            let full = v + crate::distributions::ln_factorial(y);
            assert_relative_eq!(full, -dist.pmf(y as f64, true).unwrap().ln(), max_relative = 1e-10);
        }
    }

    fn frozen_scale_fd(spec: LossSpec, y: f64, head: HeadOutput, which: usize) -> f64 {
        let h = 1e-6;
        let base = head_loss(spec, y, head).unwrap().scale;
        let unscaled = LossSpec { beta: 0.0, ..spec };
        let eval = |delta: f64| {
            let mut hh = head;
            if which == 0 {
                hh.mean_head += delta;
            } else {
                hh.disp_head = hh.disp_head.map(|d| d + delta);
            }
            base * head_loss(unscaled, y, hh).unwrap().value
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-3)
    }

    proptest! {
        #[test]
        fn reconstruction_identity(y in 0u32..60, log_mu in -3.0f64..4.0, log_phi in -4.0f64..4.0) {
            let (y, mu, phi) = (y as f64, log_mu.exp(), log_phi.exp());
            let parts = attenuation_decompose(y, mu, phi).unwrap();
            let nll = ddpn_nll(y, mu, 1.0 / phi);
            prop_assert!((parts.total() - nll).abs() <= 1e-12 * nll.abs().max(1.0));
            prop_assert!(parts.r >= 0.0);
        }

        #[test]
        fn head_gradients_match_finite_differences(
            y in 0u32..40,
            mean_head in -1.0f64..3.0,
            disp_head in -1.5f64..1.5,
            beta_idx in 0usize..3,
            fam in 0usize..4,
        ) {
            let family = [Family::DoublePoisson, Family::Poisson, Family::NegBinomial, Family::Gaussian][fam];
            let beta = [0.0, 0.5, 1.0][beta_idx];
            let spec = LossSpec::new(family, beta).unwrap();
            let disp = (family.head_count() == 2).then_some(disp_head);
            let head = HeadOutput::new(mean_head, disp);
            let y = y as f64;
            let got = head_loss(spec, y, head).unwrap();
            let fd0 = frozen_scale_fd(spec, y, head, 0);
            prop_assert!(close(got.d_mean_head, fd0, 1e-5), "mean: {} vs {}", got.d_mean_head, fd0);
            if let Some(d) = got.d_disp_head {
                let fd1 = frozen_scale_fd(spec, y, head, 1);
                prop_assert!(close(d, fd1, 1e-5), "disp: {} vs {}", d, fd1);
            }
        }
    }

    #[test]
    fn beta_one_mean_gradient_ignores_gamma() {
        for gamma in [0.01, 0.3, 1.0, 5.0, 80.0] {
            let g = ddpn_grads(7.0, 4.0, gamma, 1.0);
            assert_relative_eq!(g.d_mu, 1.0 - 7.0 / 4.0, epsilon = 1e-14);
        }
    }
}
