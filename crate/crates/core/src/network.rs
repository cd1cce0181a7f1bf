//! Small fully connected regressors with two affine output heads.
//!
//! A rectifier MLP maps (standardized) features to a hidden representation
//! `z`; two separate affine maps of `z` give the mean head and the
//! dispersion head in log space. An empty `hidden_widths` list degenerates
//! to a single affine map from inputs to heads, which is the GLM baseline.
//!
//! Training uses mean-over-batch gradients, decoupled weight decay with
//! adaptive moments, a cosine learning-rate decay to zero over all steps,
//! and keeps the weights from the epoch with the lowest validation loss.

use std::io::{BufRead, Write};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::distributions::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::losses::{head_loss, Family, HeadOutput, LossSpec};

pub const CHECKPOINT_MAGIC: &str = "ddpnkit-ckpt v1";

/// Width list used by the reference experiments.
pub const REFERENCE_WIDTHS: [usize; 4] = [128, 128, 128, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// May be empty (GLM mode).
    pub hidden_widths: Vec<usize>,
    pub family: Family,
    /// Seed for weight initialization.
    pub seed: u64,
    /// Initial bias of the dispersion head (`log γ` for the Double Poisson).
    pub gamma_bias_init: f64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, family: Family, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_widths,
            family,
            seed,
            gamma_bias_init: 0.0,
        }
    }

    pub fn head_count(&self) -> usize {
        self.family.head_count()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Domain("layer widths must be positive".into()));
        }
        if !self.gamma_bias_init.is_finite() {
            return Err(Error::Domain("gamma_bias_init must be finite".into()));
        }
        Ok(())
    }
}

/// An affine map `x ↦ W x + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// `U(−1/√fan_in, 1/√fan_in)` for weights and biases.
    fn uniform_fan_in<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(out_dim, |_| rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    fn apply(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = input.dot(&self.weight.t());
        out += &self.bias;
        out
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Hidden layers plus the mean head `(w_μ, b_μ)` and optional dispersion
/// head `(w_γ, b_γ)`. Gradients use the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub hidden: Vec<Dense>,
    pub mean_head: Dense,
    pub disp_head: Option<Dense>,
}

impl MlpWeights {
    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self
                .hidden
                .iter()
                .map(|d| Dense::zeros(d.out_dim(), d.in_dim()))
                .collect(),
            mean_head: Dense::zeros(1, self.mean_head.in_dim()),
            disp_head: self.disp_head.as_ref().map(|d| Dense::zeros(1, d.in_dim())),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map(Dense::in_dim)
            .unwrap_or_else(|| self.mean_head.in_dim())
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.mean_head))
            .chain(self.disp_head.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.mean_head))
            .chain(self.disp_head.iter_mut())
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|d| {
                [
                    d.weight.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|d| {
                [
                    d.weight.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Raw head outputs for a batch of (already standardized) rows.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Vec<HeadOutput>> {
        let cache = self.forward_cached(x)?;
        Ok(cache.heads())
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut activations = vec![x.to_owned()];
        for layer in &self.hidden {
            let mut z = layer.apply(&activations.last().expect("input").view());
            z.mapv_inplace(|v| v.max(0.0));
            activations.push(z);
        }
        let last = activations.last().expect("input").view();
        let mean = self.mean_head.apply(&last).column(0).to_owned();
        let disp = self
            .disp_head
            .as_ref()
            .map(|h| h.apply(&last).column(0).to_owned());
        Ok(ForwardCache {
            activations,
            mean,
            disp,
        })
    }
}

struct ForwardCache {
    /// Input followed by each post-rectifier hidden representation.
    activations: Vec<Array2<f64>>,
    mean: Array1<f64>,
    disp: Option<Array1<f64>>,
}

impl ForwardCache {
    fn heads(&self) -> Vec<HeadOutput> {
        (0..self.mean.len())
            .map(|i| HeadOutput::new(self.mean[i], self.disp.as_ref().map(|d| d[i])))
            .collect()
    }
}

/// Initialize weights deterministically from `config.seed`.
pub fn init_mlp(config: &MlpConfig) -> Result<MlpWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut hidden = Vec::with_capacity(config.hidden_widths.len());
    let mut fan_in = config.input_dim;
    for &width in &config.hidden_widths {
        hidden.push(Dense::uniform_fan_in(width, fan_in, &mut rng));
        fan_in = width;
    }
    let mean_head = Dense::uniform_fan_in(1, fan_in, &mut rng);
    let disp_head = (config.head_count() == 2).then(|| {
        let mut head = Dense::uniform_fan_in(1, fan_in, &mut rng);
        head.bias[0] = config.gamma_bias_init;
        head
    });
    Ok(MlpWeights {
        hidden,
        mean_head,
        disp_head,
    })
}

/// Raw head output for a single (already standardized) feature vector.
pub fn forward(weights: &MlpWeights, x: &[f64]) -> Result<HeadOutput> {
    let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(weights.forward_batch(view)?[0])
}

/// Mean-over-batch loss and its gradient with respect to every weight.
pub fn backward(
    weights: &MlpWeights,
    x: ArrayView2<f64>,
    y: &[f64],
    loss: LossSpec,
) -> Result<(f64, MlpWeights)> {
    if x.nrows() == 0 {
        return Err(Error::Domain("backward needs a nonempty batch".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Shape {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    let cache = weights.forward_cached(x)?;
    let n = y.len();
    let inv_n = 1.0 / n as f64;
    let mut d_mean = Array2::<f64>::zeros((n, 1));
    let mut d_disp = Array2::<f64>::zeros((n, 1));
    let mut total = 0.0;
    for (i, head) in cache.heads().into_iter().enumerate() {
        let l = head_loss(loss, y[i], head)?;
        if !l.value.is_finite() {
            return Err(Error::NumericDivergence {
                epoch: 0,
                batch: i,
                partial: None,
            });
        }
        total += l.value;
        d_mean[[i, 0]] = l.d_mean_head * inv_n;
        d_disp[[i, 0]] = l.d_disp_head.unwrap_or(0.0) * inv_n;
    }

    let mut grads = weights.zeros_like();
    let last = cache.activations.last().expect("input");
    grads.mean_head.weight = standard(d_mean.t().dot(last));
    grads.mean_head.bias = d_mean.sum_axis(Axis(0));
    let mut d_act = d_mean.dot(&weights.mean_head.weight);
    if let (Some(head), Some(g)) = (&weights.disp_head, grads.disp_head.as_mut()) {
        g.weight = standard(d_disp.t().dot(last));
        g.bias = d_disp.sum_axis(Axis(0));
        d_act += &d_disp.dot(&head.weight);
    }

    for l in (0..weights.hidden.len()).rev() {
        let out = &cache.activations[l + 1];
        // rectifier derivative: pass where the output is positive
        let mut d_pre = d_act;
        d_pre.zip_mut_with(out, |d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        let input = &cache.activations[l];
        grads.hidden[l].weight = standard(d_pre.t().dot(input));
        grads.hidden[l].bias = d_pre.sum_axis(Axis(0));
        d_act = d_pre.dot(&weights.hidden[l].weight);
    }
    Ok((total * inv_n, grads))
}

/// Products with a transposed operand may come back column-major.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Per-feature standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Constant features keep unit scale.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.sum() / n).collect();
        let std = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, m)| {
                let v = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// A trained (or initialized) network together with its loss and feature scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub loss: LossSpec,
    pub scaler: FeatureScaler,
    pub weights: MlpWeights,
}

impl MlpModel {
    pub fn new(config: MlpConfig, loss: LossSpec) -> Result<Self> {
        if config.family != loss.family {
            return Err(Error::Usage(format!(
                "network family {} does not match loss family {}",
                config.family, loss.family
            )));
        }
        let weights = init_mlp(&config)?;
        Ok(Self {
            scaler: FeatureScaler::identity(config.input_dim),
            config,
            loss,
            weights,
        })
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    /// Head outputs for raw (unstandardized) feature rows.
    pub fn predict_heads(&self, x: ArrayView2<f64>) -> Result<Vec<HeadOutput>> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape {
                expected: self.config.input_dim,
                got: x.ncols(),
            });
        }
        self.weights.forward_batch(self.scaler.transform(x).view())
    }

    pub fn predict_head(&self, x: &[f64]) -> Result<HeadOutput> {
        let view =
            ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Domain(e.to_string()))?;
        Ok(self.predict_heads(view)?[0])
    }

    pub fn predict_distribution(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        self.family().distribution(self.predict_head(x)?)
    }

    pub fn predict_distributions(&self, x: ArrayView2<f64>) -> Result<Vec<PredictiveDistribution>> {
        self.predict_heads(x)?
            .into_iter()
            .map(|h| self.family().distribution(h))
            .collect()
    }

    /// Mean training objective over a dataset (β-scaled unless `unscaled`).
    pub fn mean_loss(&self, data: &Dataset, unscaled: bool) -> Result<f64> {
        let spec = if unscaled {
            LossSpec {
                beta: 0.0,
                ..self.loss
            }
        } else {
            self.loss
        };
        let heads = self.predict_heads(data.x.view())?;
        let mut total = 0.0;
        for (h, &y) in heads.iter().zip(&data.y) {
            total += head_loss(spec, y, *h)?.value;
        }
        Ok(total / data.len() as f64)
    }

    /// Write the versioned text checkpoint. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "family={}", self.config.family)?;
        writeln!(out, "beta={:?}", self.loss.beta)?;
        writeln!(out, "input_dim={}", self.config.input_dim)?;
        let widths: Vec<String> = self.config.hidden_widths.iter().map(|w| w.to_string()).collect();
        writeln!(out, "hidden_widths={}", widths.join(","))?;
        writeln!(out, "seed={}", self.config.seed)?;
        writeln!(out, "gamma_bias_init={:?}", self.config.gamma_bias_init)?;
        write_vector(&mut out, "scaler.mean", &self.scaler.mean)?;
        write_vector(&mut out, "scaler.std", &self.scaler.std)?;
        for (i, layer) in self.weights.hidden.iter().enumerate() {
            write_dense(&mut out, &format!("hidden.{i}"), layer)?;
        }
        write_dense(&mut out, "mean_head", &self.weights.mean_head)?;
        if let Some(h) = &self.weights.disp_head {
            write_dense(&mut out, "disp_head", h)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = move || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of checkpoint".into()))?
                .map_err(Error::from)
        };
        if next()? != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!("missing '{CHECKPOINT_MAGIC}' header")));
        }
        let family: Family = expect_key(&next()?, "family")?.parse()?;
        let beta = parse_f64(expect_key(&next()?, "beta")?)?;
        let input_dim = parse_usize(expect_key(&next()?, "input_dim")?)?;
        let widths_raw = expect_key(&next()?, "hidden_widths")?.to_string();
        let hidden_widths = if widths_raw.is_empty() {
            Vec::new()
        } else {
            widths_raw
                .split(',')
                .map(parse_usize)
                .collect::<Result<Vec<_>>>()?
        };
        let seed = expect_key(&next()?, "seed")?
            .parse::<u64>()
            .map_err(|e| Error::Parse(e.to_string()))?;
        let gamma_bias_init = parse_f64(expect_key(&next()?, "gamma_bias_init")?)?;
        let config = MlpConfig {
            input_dim,
            hidden_widths,
            family,
            seed,
            gamma_bias_init,
        };
        config.validate()?;
        let loss = LossSpec::new(family, beta)?;

        let mean = read_vector(&mut next, "scaler.mean", input_dim)?;
        let std = read_vector(&mut next, "scaler.std", input_dim)?;
        let mut hidden = Vec::new();
        let mut fan_in = input_dim;
        for (i, &w) in config.hidden_widths.iter().enumerate() {
            hidden.push(read_dense(&mut next, &format!("hidden.{i}"), w, fan_in)?);
            fan_in = w;
        }
        let mean_head = read_dense(&mut next, "mean_head", 1, fan_in)?;
        let disp_head = if family.head_count() == 2 {
            Some(read_dense(&mut next, "disp_head", 1, fan_in)?)
        } else {
            None
        };
        let weights = MlpWeights {
            hidden,
            mean_head,
            disp_head,
        };
        if !weights.is_finite() {
            return Err(Error::Parse("checkpoint holds non-finite weights".into()));
        }
        Ok(Self {
            config,
            loss,
            scaler: FeatureScaler { mean, std },
            weights,
        })
    }
}

fn write_vector<W: Write>(out: &mut W, name: &str, v: &[f64]) -> Result<()> {
    writeln!(out, "tensor {name} {}", v.len())?;
    let row: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    writeln!(out, "{}", row.join(" "))?;
    Ok(())
}

fn write_dense<W: Write>(out: &mut W, name: &str, d: &Dense) -> Result<()> {
    writeln!(out, "tensor {name}.weight {} {}", d.out_dim(), d.in_dim())?;
    for row in d.weight.rows() {
        let row: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    write_vector(out, &format!("{name}.bias"), d.bias.as_slice().expect("standard layout"))
}

fn expect_key<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| Error::Parse(format!("expected '{key}=...', got '{line}'")))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("bad float '{s}': {e}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|e| Error::Parse(format!("bad integer '{s}': {e}")))
}

fn parse_row(line: &str, expected: usize) -> Result<Vec<f64>> {
    let row = line
        .split_whitespace()
        .map(parse_f64)
        .collect::<Result<Vec<_>>>()?;
    if row.len() != expected {
        return Err(Error::Shape {
            expected,
            got: row.len(),
        });
    }
    Ok(row)
}

fn read_header(line: &str, name: &str, dims: &[usize]) -> Result<()> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("tensor") || parts.next() != Some(name) {
        return Err(Error::Parse(format!("expected tensor '{name}', got '{line}'")));
    }
    let got = parts.map(parse_usize).collect::<Result<Vec<_>>>()?;
    if got != dims {
        return Err(Error::Parse(format!(
            "tensor '{name}' has dims {got:?}, expected {dims:?}"
        )));
    }
    Ok(())
}

fn read_vector(
    next: &mut impl FnMut() -> Result<String>,
    name: &str,
    len: usize,
) -> Result<Vec<f64>> {
    read_header(&next()?, name, &[len])?;
    parse_row(&next()?, len)
}

fn read_dense(
    next: &mut impl FnMut() -> Result<String>,
    name: &str,
    out_dim: usize,
    in_dim: usize,
) -> Result<Dense> {
    read_header(&next()?, &format!("{name}.weight"), &[out_dim, in_dim])?;
    let mut flat = Vec::with_capacity(out_dim * in_dim);
    for _ in 0..out_dim {
        flat.extend(parse_row(&next()?, in_dim)?);
    }
    let weight = Array2::from_shape_vec((out_dim, in_dim), flat)
        .map_err(|e| Error::Parse(e.to_string()))?;
    let bias = Array1::from(read_vector(next, &format!("{name}.bias"), out_dim)?);
    Ok(Dense { weight, bias })
}

// ---------------------------------------------------------------------------
// optimization

/// `lr0 · ½(1 + cos(π t / T))`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl AdamW {
    pub fn new(weights: &MlpWeights, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = weights.tensors().iter().map(|t| t.len()).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, weights: &mut MlpWeights, grads: &MlpWeights, lr: f64) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        let decay = 1.0 - lr * self.weight_decay;
        for (((param, grad), m), v) in weights
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] = param[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Seed of the shuffling stream.
    pub seed: u64,
    /// Select the checkpoint on the plain NLL instead of the β-scaled objective.
    pub select_on_unscaled: bool,
    /// Standardize features with train-split statistics.
    pub standardize: bool,
}

impl TrainConfig {
    pub fn new(loss: LossSpec, epochs: usize, seed: u64) -> Self {
        Self {
            loss,
            epochs,
            batch_size: 32,
            lr0: 1e-3,
            weight_decay: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            select_on_unscaled: false,
            standardize: true,
        }
    }

    fn validate(&self, n_train: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Domain("epochs must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(Error::Domain(format!(
                "batch_size must lie in 1..={n_train}, got {}",
                self.batch_size
            )));
        }
        if !(self.lr0 >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Domain("learning rate and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub family: Family,
    pub beta: f64,
    pub seed: u64,
    pub init_seed: u64,
    pub hidden_widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub gamma_bias_init: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Equality ignoring the wall-clock field.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        &a == other
    }
}

/// Weights from the best-validation epoch, the weights after the last epoch,
/// and the run report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: MlpModel,
    pub last: MlpModel,
    pub report: TrainReport,
}

/// State visible to a per-epoch observer.
pub struct EpochView<'a> {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub model: &'a MlpModel,
}

pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    mlp: &MlpConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(train_set, val_set, mlp, config, |_| {})
}

/// Like [`train`], calling `observer` after every epoch.
pub fn train_observed<F>(
    train_set: &Dataset,
    val_set: &Dataset,
    mlp: &MlpConfig,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochView<'_>),
{
    let started = Instant::now();
    config.validate(train_set.len())?;
    if val_set.is_empty() {
        return Err(Error::Domain("validation split is empty".into()));
    }
    if train_set.dim() != mlp.input_dim || val_set.dim() != mlp.input_dim {
        return Err(Error::Shape {
            expected: mlp.input_dim,
            got: train_set.dim(),
        });
    }
    if mlp.family.is_discrete() {
        train_set.require_counts()?;
        val_set.require_counts()?;
    }

    let mut model = MlpModel::new(mlp.clone(), config.loss)?;
    if config.standardize {
        model.scaler = FeatureScaler::fit(train_set.x.view());
    }
    let x_train = model.scaler.transform(train_set.x.view());

    let mut report = TrainReport {
        family: mlp.family,
        beta: config.loss.beta,
        seed: config.seed,
        init_seed: mlp.seed,
        hidden_widths: mlp.hidden_widths.clone(),
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr0: config.lr0,
        weight_decay: config.weight_decay,
        gamma_bias_init: mlp.gamma_bias_init,
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        wall_time_secs: 0.0,
    };

    let mut optimizer = AdamW::new(
        &model.weights,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        config.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = model.clone();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let xb = x_train.select(Axis(0), chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| train_set.y[i]).collect();
            let (loss, grads) = match backward(&model.weights, xb.view(), &yb, config.loss) {
                Ok(v) => v,
                Err(Error::NumericDivergence { .. }) => {
                    report.wall_time_secs = started.elapsed().as_secs_f64();
                    return Err(Error::NumericDivergence {
                        epoch,
                        batch: b,
                        partial: Some(Box::new(report)),
                    });
                }
                Err(e) => return Err(e),
            };
            let lr = cosine_lr(config.lr0, step, total_steps);
            optimizer.step(&mut model.weights, &grads, lr);
            step += 1;
            epoch_loss += loss * chunk.len() as f64;
        }
        let train_loss = epoch_loss / n as f64;
        let val_loss = model.mean_loss(val_set, config.select_on_unscaled)?;
        if !val_loss.is_finite() || !model.weights.is_finite() {
            report.wall_time_secs = started.elapsed().as_secs_f64();
            return Err(Error::NumericDivergence {
                epoch,
                batch: batches_per_epoch,
                partial: Some(Box::new(report)),
            });
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best = model.clone();
        }
        observer(&EpochView {
            epoch,
            train_loss,
            val_loss,
            model: &model,
        });
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        best,
        last: model,
        report,
    })
}
