//! Moment-deviation functions for the Double Poisson under Efron's
//! moment-matching map `(μ₀, σ₀²) ↦ (μ = μ₀, γ = μ₀/σ₀²)`.
//!
//! With `h(z) = e^{-z} z^z / z!`, `r(μ, γ, z) = γ(z − μ + z log μ − z log z)`
//! and `s = h·exp(r)`, the true mean and variance of `DP(μ₀, γ₀)` differ from
//! the targets by
//!
//! ```text
//! ε₁ = | Σ s·(y − μ₀) / Σ s |
//! ε₂ = | (d·γ₀^½·Σ s − γ₀ (Σ s·(y − μ₀))²) / (γ₀ (Σ s)²) |
//! d  = γ₀^{-½} [ Σ s·(γ₀ (y − μ₀)² − y) + Σ s·(y − μ₀) ]
//! ```
//!
//! Every infinite sum is replaced by a partial sum over `y = 0..n_terms`.
//! The ratios are invariant to a common rescaling of `s`, so the terms are
//! evaluated relative to their largest log value.

use std::io::Write;

use crate::distributions::{ln_factorial, xlogx};
use crate::error::{Error, Result};
use crate::exec;

/// Partial-sum length used when none is given.
pub const DEFAULT_N_TERMS: usize = 100;

/// `h(z) = e^{-z} z^z / z!`, in log space.
pub fn ln_h(z: u64) -> f64 {
    let zf = z as f64;
    -zf + xlogx(zf) - ln_factorial(z)
}

/// `r(μ, γ, z) = γ(z − μ + z log μ − z log z)`.
pub fn r_term(mu: f64, gamma: f64, z: u64) -> f64 {
    let zf = z as f64;
    gamma * (zf - mu + zf * mu.ln() - xlogx(zf))
}

/// `log s(μ, γ, z) = log h(z) + r(μ, γ, z)`.
pub fn ln_s(mu: f64, gamma: f64, z: u64) -> f64 {
    ln_h(z) + r_term(mu, gamma, z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdfValues {
    pub eps1: f64,
    pub eps2: f64,
}

/// Evaluate `(ε₁, ε₂)` at target mean `mu0` and target variance `var0`.
pub fn mdf_epsilon(mu0: f64, var0: f64, n_terms: usize) -> Result<MdfValues> {
    if !(mu0 > 0.0 && mu0.is_finite()) || !(var0 > 0.0 && var0.is_finite()) {
        return Err(Error::Domain(format!(
            "targets must be positive and finite, got ({mu0}, {var0})"
        )));
    }
    if n_terms == 0 {
        return Err(Error::Domain("n_terms must be at least 1".into()));
    }
    let gamma0 = mu0 / var0;
    let logs: Vec<f64> = (0..n_terms as u64).map(|y| ln_s(mu0, gamma0, y)).collect();
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::NumericOverflow(format!(
            "no finite series term at ({mu0}, {var0})"
        )));
    }

    let (mut s0, mut s1, mut s2) = (0.0f64, 0.0f64, 0.0f64);
    for (y, lt) in logs.iter().enumerate() {
        let w = (lt - peak).exp();
        let dev = y as f64 - mu0;
        s0 += w;
        s1 += w * dev;
        s2 += w * (gamma0 * dev * dev - y as f64);
    }
    // d·γ₀^½, with the common e^{peak} scale factored out of every sum.
    let d_sqrt_gamma = s2 + s1;
    let eps1 = (s1 / s0).abs();
    let eps2 = ((d_sqrt_gamma * s0 - gamma0 * s1 * s1) / (gamma0 * s0 * s0)).abs();
    if !eps1.is_finite() || !eps2.is_finite() {
        return Err(Error::NumericOverflow(format!(
            "non-finite deviation at ({mu0}, {var0})"
        )));
    }
    Ok(MdfValues { eps1, eps2 })
}

/// ε₁/ε₂ evaluated over a rectangular grid of target moments.
///
/// `eps1[i][j]` and `eps2[i][j]` belong to `(mu_targets[i], var_targets[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGrid {
    pub mu_targets: Vec<f64>,
    pub var_targets: Vec<f64>,
    pub eps1: Vec<Vec<f64>>,
    pub eps2: Vec<Vec<f64>>,
    pub n_terms: usize,
}

pub fn moments_grid(mu_targets: &[f64], var_targets: &[f64], n_terms: usize) -> Result<MomentGrid> {
    if mu_targets.is_empty() || var_targets.is_empty() {
        return Err(Error::Domain("target lists must be nonempty".into()));
    }
    let rows = exec::map(mu_targets, |&mu0| {
        var_targets
            .iter()
            .map(|&var0| {
                mdf_epsilon(mu0, var0, n_terms).map_err(|e| match e {
                    Error::NumericOverflow(msg) => Error::NumericOverflow(format!(
                        "grid cell (mu0 = {mu0}, var0 = {var0}): {msg}"
                    )),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()
    });
    let rows = exec::collect_results(rows)?;
    let eps1 = rows.iter().map(|r| r.iter().map(|v| v.eps1).collect()).collect();
    let eps2 = rows.iter().map(|r| r.iter().map(|v| v.eps2).collect()).collect();
    Ok(MomentGrid {
        mu_targets: mu_targets.to_vec(),
        var_targets: var_targets.to_vec(),
        eps1,
        eps2,
        n_terms,
    })
}

impl MomentGrid {
    /// Write the grid as CSV, header `mu0,var0,eps1,eps2`, rows ordered with
    /// `mu0` outermost and `var0` innermost.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "mu0,var0,eps1,eps2")?;
        for (i, mu0) in self.mu_targets.iter().enumerate() {
            for (j, var0) in self.var_targets.iter().enumerate() {
                writeln!(out, "{mu0:?},{var0:?},{:?},{:?}", self.eps1[i][j], self.eps2[i][j])?;
            }
        }
        Ok(())
    }
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helper_identities() {
        assert_eq!(ln_h(0), 0.0);
        assert_eq!(r_term(3.0, 2.0, 0), -6.0);
        assert!(ln_s(2.0, 0.5, 7).exp() >= 0.0);
    }

    #[test]
    fn poisson_line_is_exact() {
        let v = mdf_epsilon(5.0, 5.0, 100).unwrap();
        assert!(v.eps1 < 1e-9 && v.eps2 < 1e-9, "{v:?}");
    }

    #[test]
    fn frozen_values_match_high_precision_oracle() {
        // 40-digit mpmath partial sums over y < 100, same formulas.
        let v = mdf_epsilon(10.0, 2.0, 100).unwrap();
        approx::assert_relative_eq!(v.eps1, 1.387_885_158_219_894_2e-3, max_relative = 1e-8);
        approx::assert_relative_eq!(v.eps2, 2.887_166_723_595_449e-4, max_relative = 1e-6);
        let v = mdf_epsilon(0.05, 5.0, 100).unwrap();
        approx::assert_relative_eq!(v.eps1, 7.581_764_098_783_665, max_relative = 1e-8);
        approx::assert_relative_eq!(v.eps2, 114.582_849_401_296_98, max_relative = 1e-8);
    }

    #[test]
    fn rejects_bad_targets() {
        assert!(mdf_epsilon(0.0, 1.0, 100).is_err());
        assert!(mdf_epsilon(1.0, -1.0, 100).is_err());
        assert!(mdf_epsilon(1.0, 1.0, 0).is_err());
        assert!(moments_grid(&[], &[1.0], 100).is_err());
    }

    #[test]
    fn small_grids() {
        let g = moments_grid(&[5.0], &[5.0], 100).unwrap();
        assert!(g.eps1[0][0] < 1e-9 && g.eps2[0][0] < 1e-9);

        let g = moments_grid(&[0.01, 1.0, 10.0], &[1.0, 10.0, 100.0], 100).unwrap();
        let worst = g
            .eps2
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |v| (i, *v)))
            .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        assert_eq!(worst.0, 0, "the mu0 = 0.01 row should dominate");
    }

    #[test]
    fn csv_layout() {
        let g = moments_grid(&[1.0, 2.0], &[1.0, 3.0], 50).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "mu0,var0,eps1,eps2");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("1.0,3.0,"));
        assert!(lines[3].starts_with("2.0,1.0,"));
    }

    #[test]
    fn logspace_endpoints() {
        let v = logspace(0.01, 100.0, 5);
        assert_eq!(v.len(), 5);
        assert_eq!(v[0], 0.01);
        assert_eq!(v[4], 100.0);
        assert!((v[2] - 1.0).abs() < 1e-12);
    }
}
