//! Datasets and the synthetic processes used in the experiments.
//!
//! | process            | covariate            | label                                         |
//! |--------------------|----------------------|-----------------------------------------------|
//! | `sine-conflation`  | `U(0, 2π)`           | `30 − y₀`, `y₀ ∝ Poisson(10 sin x + 10)⁵`     |
//! | `misspec-poisson`  | `U(0.5, 5)`          | `Poisson(exp(x/2))`                           |
//! | `misspec-nb`       | `U(0.5, 5)`          | `NB(r = x², p = ½)` via gamma–Poisson         |
//! | `beta-study`       | `U(3, 8)` + outliers | `DP(⌈x sin x + 15⌉, 6 − 0.03x²)`              |
//!
//! The misspecification covariate interval is a choice of this crate; it
//! keeps counts small enough for desk-scale training.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::distributions::{ln_factorial, PredictiveDistribution};
use crate::error::{Error, Result};

/// Feature rows `x` and labels `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        Ok(Self { x, y })
    }

    /// A dataset with a single feature column.
    pub fn from_1d(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        let x = Array2::from_shape_vec((n, 1), xs).map_err(|e| Error::Domain(e.to_string()))?;
        Self::new(x, ys)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// First feature column.
    pub fn xs(&self) -> Vec<f64> {
        self.x.column(0).to_vec()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        let x = ndarray::concatenate(Axis(0), &[self.x.view(), other.x.view()])
            .map_err(|e| Error::Domain(format!("cannot concatenate datasets: {e}")))?;
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Self::new(x, y)
    }

    /// Shuffle with `seed` and cut into consecutive parts of the given sizes.
    pub fn split(&self, sizes: &[usize], seed: u64) -> Result<Vec<Dataset>> {
        if sizes.iter().sum::<usize>() != self.len() {
            return Err(Error::Domain(format!(
                "split sizes {sizes:?} do not add up to {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut start = 0;
        Ok(sizes
            .iter()
            .map(|&s| {
                let part = self.subset(&idx[start..start + s]);
                start += s;
                part
            })
            .collect())
    }

    /// Error unless every label is a non-negative integer.
    pub fn require_counts(&self) -> Result<()> {
        match self.y.iter().find(|y| !(**y >= 0.0 && y.fract() == 0.0)) {
            Some(y) => Err(Error::Domain(format!("labels must be counts, found {y}"))),
            None => Ok(()),
        }
    }

    /// Write `x,y` CSV (`x1,…,xd,y` for several features). Floats use the
    /// shortest round-trip representation; integral labels print as integers.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = if self.dim() == 1 {
            vec!["x".into()]
        } else {
            (1..=self.dim()).map(|j| format!("x{j}")).collect()
        };
        header.push("y".into());
        w.write_record(&header)?;
        for (row, y) in self.x.rows().into_iter().zip(&self.y) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(if y.fract() == 0.0 && y.abs() < 1e15 {
                format!("{}", *y as i64)
            } else {
                format!("{y:?}")
            });
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let cols = headers.len();
        if cols < 2 || headers.get(cols - 1) != Some("y") {
            return Err(Error::Parse(format!(
                "expected header 'x,y', got '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let dim = cols - 1;
        let mut flat = Vec::new();
        let mut ys = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::Parse(format!("row {}: bad number '{s}': {e}", line + 2))
                })
            };
            for j in 0..dim {
                flat.push(parse(&rec[j])?);
            }
            ys.push(parse(&rec[dim])?);
        }
        let x = Array2::from_shape_vec((ys.len(), dim), flat)
            .map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(x, ys)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Process {
    SineConflation,
    MisspecPoisson,
    MisspecNb,
    BetaStudy,
}

impl Process {
    pub fn tag(&self) -> &'static str {
        match self {
            Process::SineConflation => "sine-conflation",
            Process::MisspecPoisson => "misspec-poisson",
            Process::MisspecNb => "misspec-nb",
            Process::BetaStudy => "beta-study",
        }
    }
}

impl fmt::Display for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Process {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "sine-conflation" | "sine" => Ok(Process::SineConflation),
            "misspec-poisson" => Ok(Process::MisspecPoisson),
            "misspec-nb" => Ok(Process::MisspecNb),
            "beta-study" => Ok(Process::BetaStudy),
            other => Err(Error::Usage(format!("unknown process '{other}'"))),
        }
    }
}

/// A generated dataset tagged with its process and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub process: Process,
    pub seed: u64,
    pub data: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
    pub test: SyntheticDataset,
}

/// Rate of the sine process at `x`.
pub fn sine_rate(x: f64) -> f64 {
    10.0 * x.sin() + 10.0
}

/// Upper end of the support used to tabulate the conflation.
pub const CONFLATION_SUPPORT: u64 = 60;
/// Labels are `SHIFT − y₀`.
pub const CONFLATION_SHIFT: u64 = 30;

/// Normalized PMF of the conflation of five `Poisson(λ)` laws on `0..=60`.
pub fn conflation_pmf(lambda: f64) -> Vec<f64> {
    let ln_lambda = lambda.ln();
    let logs: Vec<f64> = (0..=CONFLATION_SUPPORT)
        .map(|y| {
            if lambda == 0.0 {
                if y == 0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                5.0 * (y as f64 * ln_lambda - lambda - ln_factorial(y))
            }
        })
        .collect();
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn draw_from_pmf<R: Rng>(pmf: &[f64], rng: &mut R) -> u64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u64;
        }
    }
    (pmf.len() - 1) as u64
}

fn sine_conflation_rows<R: Rng>(n: usize, rng: &mut R) -> Result<Dataset> {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let pmf = conflation_pmf(sine_rate(x));
        // labels must stay non-negative; y₀ > 30 has mass far below 1e-6
        let y0 = loop {
            let y0 = draw_from_pmf(&pmf, rng);
            if y0 <= CONFLATION_SHIFT {
                break y0;
            }
        };
        xs.push(x);
        ys.push((CONFLATION_SHIFT - y0) as f64);
    }
    Dataset::from_1d(xs, ys)
}

/// Train/validation/test draws from one seeded stream (in that order).
pub fn gen_sine_conflation(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<Splits> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Domain("split sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = |data| SyntheticDataset {
        process: Process::SineConflation,
        seed,
        data,
    };
    Ok(Splits {
        train: tag(sine_conflation_rows(n_train, &mut rng)?),
        val: tag(sine_conflation_rows(n_val, &mut rng)?),
        test: tag(sine_conflation_rows(n_test, &mut rng)?),
    })
}

/// Covariates of the misspecification processes.
pub const MISSPEC_X_RANGE: (f64, f64) = (0.5, 5.0);

pub fn gen_misspec_poisson(n: usize, seed: u64) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(MISSPEC_X_RANGE.0..MISSPEC_X_RANGE.1);
        let rate = (0.5 * x).exp();
        let pois = Poisson::new(rate).map_err(|e| Error::Domain(e.to_string()))?;
        xs.push(x);
        ys.push(pois.sample(&mut rng));
    }
    Ok(SyntheticDataset {
        process: Process::MisspecPoisson,
        seed,
        data: Dataset::from_1d(xs, ys)?,
    })
}

/// `NB(r, p)` as a Poisson with a `Gamma(r, (1 − p)/p)` rate.
pub fn sample_neg_binomial<R: Rng>(r: f64, p: f64, rng: &mut R) -> Result<f64> {
    let gamma = Gamma::new(r, (1.0 - p) / p).map_err(|e| Error::Domain(e.to_string()))?;
    let rate: f64 = gamma.sample(rng);
    if rate <= 0.0 {
        return Ok(0.0);
    }
    let pois = Poisson::new(rate).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(pois.sample(rng))
}

pub fn gen_misspec_nb(n: usize, seed: u64) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        // r = x² must be positive; redraw the (measure-zero) x = 0 case
        let x = loop {
            let x: f64 = rng.random_range(MISSPEC_X_RANGE.0..MISSPEC_X_RANGE.1);
            if x != 0.0 {
                break x;
            }
        };
        xs.push(x);
        ys.push(sample_neg_binomial(x * x, 0.5, &mut rng)?);
    }
    Ok(SyntheticDataset {
        process: Process::MisspecNb,
        seed,
        data: Dataset::from_1d(xs, ys)?,
    })
}

/// `(⌈x sin x + 15⌉, 6 − 0.03x²)`.
pub fn beta_study_params(x: f64) -> (f64, f64) {
    ((x * x.sin() + 15.0).ceil(), 6.0 - 0.03 * x * x)
}

/// Locations of the isolated points appended by [`gen_beta_study`].
pub const ISOLATED_POINTS: [f64; 2] = [1.0, 10.0];

/// `n` draws on `x ∈ [3, 8]`, then `isolated_repeats` copies of each
/// isolated point with its noiseless label.
pub fn gen_beta_study(n: usize, seed: u64, isolated_repeats: usize) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n + 2 * isolated_repeats);
    let mut ys = Vec::with_capacity(n + 2 * isolated_repeats);
    for _ in 0..n {
        let x = rng.random_range(3.0..=8.0);
        let (mu, gamma) = beta_study_params(x);
        let dist = PredictiveDistribution::double_poisson(mu, gamma)?;
        xs.push(x);
        ys.push(dist.sample(&mut rng, 1)?[0]);
    }
    for &x in &ISOLATED_POINTS {
        for _ in 0..isolated_repeats {
            xs.push(x);
            ys.push(beta_study_params(x).0);
        }
    }
    Ok(SyntheticDataset {
        process: Process::BetaStudy,
        seed,
        data: Dataset::from_1d(xs, ys)?,
    })
}

/// Seed offsets of the separately drawn validation and test sets of the
/// β-study, which carry no isolated points.
const BETA_VAL_SEED_OFFSET: u64 = 1_000_003;
const BETA_TEST_SEED_OFFSET: u64 = 2_000_006;

/// Default `(train, val, test)` sizes per process.
pub fn default_sizes(process: Process) -> [usize; 3] {
    match process {
        Process::SineConflation => [800, 100, 100],
        Process::MisspecPoisson | Process::MisspecNb => [1400, 200, 400],
        Process::BetaStudy => [500, 100, 100],
    }
}

/// Train/validation/test sets for any process.
///
/// The misspecification processes draw `n_train + n_val + n_test` rows and
/// split them with a seeded shuffle. The β-study draws each split on its own,
/// appending `isolated_repeats` copies of the isolated points to the training
/// split only.
pub fn generate_splits(
    process: Process,
    sizes: [usize; 3],
    seed: u64,
    isolated_repeats: usize,
) -> Result<Splits> {
    let [n_train, n_val, n_test] = sizes;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Domain("split sizes must be positive".into()));
    }
    let wrap = |data| SyntheticDataset {
        process,
        seed,
        data,
    };
    match process {
        Process::SineConflation => gen_sine_conflation(n_train, n_val, n_test, seed),
        Process::MisspecPoisson | Process::MisspecNb => {
            let total = n_train + n_val + n_test;
            let all = if process == Process::MisspecPoisson {
                gen_misspec_poisson(total, seed)?
            } else {
                gen_misspec_nb(total, seed)?
            };
            let mut parts = all.data.split(&sizes, seed)?.into_iter();
            let mut next = || wrap(parts.next().expect("three parts"));
            Ok(Splits {
                train: next(),
                val: next(),
                test: next(),
            })
        }
        Process::BetaStudy => Ok(Splits {
            train: gen_beta_study(n_train, seed, isolated_repeats)?,
            val: wrap(gen_beta_study(n_val, seed.wrapping_add(BETA_VAL_SEED_OFFSET), 0)?.data),
            test: wrap(gen_beta_study(n_test, seed.wrapping_add(BETA_TEST_SEED_OFFSET), 0)?.data),
        }),
    }
}
