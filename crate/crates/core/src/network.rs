//! Dual-encoder convolutional classifier over complex spectrogram planes.
//!
//! Each encoder maps an `[B, F, C, T]` plane (frequency maps x channels x
//! time) through
//!
//! 1. batch norm per frequency map,
//! 2. a filter whose kernel spans one whole axis and collapses it, two
//!    output maps per input map (`2F` maps),
//! 3. batch norm + ELU,
//! 4. average pooling along time,
//! 5. depthwise temporal convolution, zero "same" padding,
//! 6. pointwise mix of the `2F` maps into `mix_maps`,
//! 7. batch norm + ELU,
//! 8. flatten.
//!
//! Encoder features are concatenated and fed to one linear head. Gradients
//! are derived by hand per layer; nothing here records a tape.
//!
//! Internally every stage after the filter works on a `[B, maps, S, L]`
//! layout where `S` is whatever spatial extent survived the filter and `L`
//! the time extent.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array4, ArrayView4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::binio::{put_raw_f32s, put_u32, put_u64, u32_dim, LeReader};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSTNET01";

/// Axis the stage-2 filter spans and collapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterAxis {
    Spatial,
    Frequency,
    Temporal,
}

impl FilterAxis {
    fn code(self) -> u8 {
        match self {
            FilterAxis::Spatial => 0,
            FilterAxis::Frequency => 1,
            FilterAxis::Temporal => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(FilterAxis::Spatial),
            1 => Ok(FilterAxis::Frequency),
            2 => Ok(FilterAxis::Temporal),
            other => Err(Error::UnsupportedAxis(format!("code {other}"))),
        }
    }
}

impl FromStr for FilterAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spatial" => Ok(FilterAxis::Spatial),
            "frequency" => Ok(FilterAxis::Frequency),
            "temporal" => Ok(FilterAxis::Temporal),
            other => Err(Error::UnsupportedAxis(other.to_string())),
        }
    }
}

impl fmt::Display for FilterAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterAxis::Spatial => "spatial",
            FilterAxis::Frequency => "frequency",
            FilterAxis::Temporal => "temporal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_freq: usize,
    pub n_channels: usize,
    pub n_time: usize,
    pub pool_len: usize,
    pub temporal_kernel: usize,
    pub mix_maps: usize,
    pub filter_axis: FilterAxis,
}

impl EncoderConfig {
    /// Defaults for a 128-channel, 300-sample input with `n_freq` maps.
    pub fn new(n_freq: usize) -> Self {
        Self {
            n_freq,
            n_channels: 128,
            n_time: 300,
            pool_len: 4,
            temporal_kernel: 16,
            mix_maps: 16,
            filter_axis: FilterAxis::Spatial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_freq == 0 || self.n_channels == 0 || self.n_time == 0 {
            return bad(format!("encoder dims must be positive: {self:?}"));
        }
        if self.pool_len == 0 || !self.n_time.is_multiple_of(self.pool_len) {
            return bad(format!("n_time {} not divisible by pool_len {}", self.n_time, self.pool_len));
        }
        if self.temporal_kernel == 0 || self.temporal_kernel > self.n_time / self.pool_len {
            return bad(format!(
                "temporal_kernel {} must be in 1..={}",
                self.temporal_kernel,
                self.n_time / self.pool_len
            ));
        }
        if self.mix_maps == 0 {
            return bad("mix_maps must be positive".into());
        }
        Ok(())
    }

    /// Maps leaving the stage-2 filter.
    pub fn filter_maps(&self) -> usize {
        2 * self.n_freq
    }

    /// Length of one stage-2 kernel: the full extent of the filtered axis.
    pub fn filter_kernel_len(&self) -> usize {
        match self.filter_axis {
            FilterAxis::Spatial => self.n_channels,
            FilterAxis::Frequency => self.n_freq,
            FilterAxis::Temporal => self.n_time,
        }
    }

    /// `(spatial extent, time extent)` after stage 2.
    pub fn filtered_extent(&self) -> (usize, usize) {
        match self.filter_axis {
            FilterAxis::Spatial => (1, self.n_time),
            FilterAxis::Frequency => (self.n_channels, self.n_time),
            FilterAxis::Temporal => (self.n_channels, 1),
        }
    }

    /// Pool length actually applied; pooling is skipped once time is collapsed.
    pub fn effective_pool(&self) -> usize {
        match self.filter_axis {
            FilterAxis::Temporal => 1,
            _ => self.pool_len,
        }
    }

    pub fn pooled_len(&self) -> usize {
        self.filtered_extent().1 / self.effective_pool()
    }

    pub fn flat_dim(&self) -> usize {
        self.mix_maps * self.filtered_extent().0 * self.pooled_len()
    }

    pub fn learnable_count(&self) -> usize {
        let m = self.filter_maps();
        2 * self.n_freq                       // bn0
            + m * self.filter_kernel_len()    // filter, no bias
            + 2 * m                           // bn1
            + m * self.temporal_kernel        // depthwise, no bias
            + self.mix_maps * m + self.mix_maps // pointwise + bias
            + 2 * self.mix_maps // bn2
    }
}

/// Encoder hyperparameters that do not depend on the data shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub filter_axis: FilterAxis,
    pub pool_len: usize,
    pub temporal_kernel: usize,
    pub mix_maps: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let d = EncoderConfig::new(1);
        Self {
            filter_axis: d.filter_axis,
            pool_len: d.pool_len,
            temporal_kernel: d.temporal_kernel,
            mix_maps: d.mix_maps,
        }
    }
}

impl ArchConfig {
    pub fn encoder(&self, n_freq: usize, n_channels: usize, n_time: usize) -> EncoderConfig {
        EncoderConfig {
            n_freq,
            n_channels,
            n_time,
            pool_len: self.pool_len,
            temporal_kernel: self.temporal_kernel,
            mix_maps: self.mix_maps,
            filter_axis: self.filter_axis,
        }
    }
}

/// Encoder settings shared by every encoder, plus how many encoders feed the
/// head and how many classes it scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_encoders: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_encoders == 0 {
            return Err(Error::InvalidConfig("n_encoders must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        Ok(())
    }

    pub fn head_inputs(&self) -> usize {
        self.n_encoders * self.encoder.flat_dim()
    }

    pub fn learnable_count(&self) -> usize {
        self.n_encoders * self.encoder.learnable_count() + self.n_classes * self.head_inputs() + self.n_classes
    }
}

/// Learnable scalars of the two-encoder model. Running batch-norm statistics
/// are not counted.
pub fn parameter_count(cfg: &EncoderConfig, n_classes: usize) -> usize {
    ModelConfig {
        encoder: *cfg,
        n_encoders: 2,
        n_classes,
    }
    .learnable_count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(n: usize) -> Self {
        Self {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
        }
    }

    fn zeros_like(&self) -> Self {
        let n = self.gamma.len();
        Self {
            gamma: Array1::zeros(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::zeros(n),
        }
    }

    fn len(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub bn0: BatchNorm,
    /// `[2F, kernel_len]`; row `o` reads input map `o / 2` except on the
    /// frequency axis, where every row spans all maps.
    pub filter: Array2<f64>,
    pub bn1: BatchNorm,
    /// `[2F, temporal_kernel]`.
    pub depthwise: Array2<f64>,
    /// `[mix_maps, 2F]`.
    pub mix_weight: Array2<f64>,
    pub mix_bias: Array1<f64>,
    pub bn2: BatchNorm,
}

impl EncoderParams {
    /// Weights uniform in `+-sqrt(1/fan_in)`, batch norm at identity.
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let m = cfg.filter_maps();
        let k = cfg.filter_kernel_len();
        Self {
            bn0: BatchNorm::new(cfg.n_freq),
            filter: uniform2(rng, m, k, k),
            bn1: BatchNorm::new(m),
            depthwise: uniform2(rng, m, cfg.temporal_kernel, cfg.temporal_kernel),
            mix_weight: uniform2(rng, cfg.mix_maps, m, m),
            mix_bias: uniform1(rng, cfg.mix_maps, m),
            bn2: BatchNorm::new(cfg.mix_maps),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            bn0: self.bn0.zeros_like(),
            filter: Array2::zeros(self.filter.dim()),
            bn1: self.bn1.zeros_like(),
            depthwise: Array2::zeros(self.depthwise.dim()),
            mix_weight: Array2::zeros(self.mix_weight.dim()),
            mix_bias: Array1::zeros(self.mix_bias.len()),
            bn2: self.bn2.zeros_like(),
        }
    }
}

fn uniform2(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

fn uniform1(rng: &mut impl Rng, n: usize, fan_in: usize) -> Array1<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Array1::from_shape_simple_fn(n, || rng.random_range(-bound..=bound))
}

/// Every tensor of the model. The same type carries gradients, in which case
/// the running statistics are unused and stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub encoders: Vec<EncoderParams>,
    /// `[n_classes, n_encoders * flat_dim]`.
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

pub type Gradients = ModelParams;

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoders = (0..config.n_encoders)
            .map(|_| EncoderParams::init(&config.encoder, &mut rng))
            .collect();
        let d = config.head_inputs();
        Ok(Self {
            config,
            seed,
            encoders,
            head_weight: uniform2(&mut rng, config.n_classes, d, d),
            head_bias: uniform1(&mut rng, config.n_classes, d),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            seed: self.seed,
            encoders: self.encoders.iter().map(EncoderParams::zeros_like).collect(),
            head_weight: Array2::zeros(self.head_weight.dim()),
            head_bias: Array1::zeros(self.head_bias.len()),
        }
    }

    pub fn learnable_count(&self) -> usize {
        self.learnable().iter().map(|(_, v)| v.len()).sum()
    }

    /// Named learnable tensors in a fixed order.
    pub fn learnable(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (e, enc) in self.encoders.iter().enumerate() {
            let p = |n: &str| format!("enc{e}.{n}");
            out.push((p("bn0.gamma"), slice(&enc.bn0.gamma)));
            out.push((p("bn0.beta"), slice(&enc.bn0.beta)));
            out.push((p("filter"), slice2(&enc.filter)));
            out.push((p("bn1.gamma"), slice(&enc.bn1.gamma)));
            out.push((p("bn1.beta"), slice(&enc.bn1.beta)));
            out.push((p("depthwise"), slice2(&enc.depthwise)));
            out.push((p("mix.weight"), slice2(&enc.mix_weight)));
            out.push((p("mix.bias"), slice(&enc.mix_bias)));
            out.push((p("bn2.gamma"), slice(&enc.bn2.gamma)));
            out.push((p("bn2.beta"), slice(&enc.bn2.beta)));
        }
        out.push(("head.weight".into(), slice2(&self.head_weight)));
        out.push(("head.bias".into(), slice(&self.head_bias)));
        out
    }

    /// Same order as [`ModelParams::learnable`].
    pub fn learnable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for enc in &mut self.encoders {
            out.push(slice_mut(&mut enc.bn0.gamma));
            out.push(slice_mut(&mut enc.bn0.beta));
            out.push(slice2_mut(&mut enc.filter));
            out.push(slice_mut(&mut enc.bn1.gamma));
            out.push(slice_mut(&mut enc.bn1.beta));
            out.push(slice2_mut(&mut enc.depthwise));
            out.push(slice2_mut(&mut enc.mix_weight));
            out.push(slice_mut(&mut enc.mix_bias));
            out.push(slice_mut(&mut enc.bn2.gamma));
            out.push(slice_mut(&mut enc.bn2.beta));
        }
        out.push(slice2_mut(&mut self.head_weight));
        out.push(slice_mut(&mut self.head_bias));
        out
    }

    /// Every tensor with its shape, running statistics included.
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (e, enc) in self.encoders.iter().enumerate() {
            for (tag, bn) in [("bn0", &enc.bn0), ("bn1", &enc.bn1), ("bn2", &enc.bn2)] {
                for (field, v) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    out.push((format!("enc{e}.{tag}.{field}"), vec![v.len()], slice(v)));
                }
            }
            for (name, a) in [("filter", &enc.filter), ("depthwise", &enc.depthwise), ("mix.weight", &enc.mix_weight)] {
                out.push((format!("enc{e}.{name}"), a.shape().to_vec(), slice2(a)));
            }
            out.push((format!("enc{e}.mix.bias"), vec![enc.mix_bias.len()], slice(&enc.mix_bias)));
        }
        out.push(("head.weight".into(), self.head_weight.shape().to_vec(), slice2(&self.head_weight)));
        out.push(("head.bias".into(), vec![self.head_bias.len()], slice(&self.head_bias)));
        out
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        if name == "head.weight" {
            return Some(slice2_mut(&mut self.head_weight));
        }
        if name == "head.bias" {
            return Some(slice_mut(&mut self.head_bias));
        }
        let rest = name.strip_prefix("enc")?;
        let (idx, field) = rest.split_once('.')?;
        let enc = self.encoders.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "filter" => Some(slice2_mut(&mut enc.filter)),
            "depthwise" => Some(slice2_mut(&mut enc.depthwise)),
            "mix.weight" => Some(slice2_mut(&mut enc.mix_weight)),
            "mix.bias" => Some(slice_mut(&mut enc.mix_bias)),
            _ => {
                let (tag, f) = field.split_once('.')?;
                let bn = match tag {
                    "bn0" => &mut enc.bn0,
                    "bn1" => &mut enc.bn1,
                    "bn2" => &mut enc.bn2,
                    _ => return None,
                };
                let v = match f {
                    "gamma" => &mut bn.gamma,
                    "beta" => &mut bn.beta,
                    "running_mean" => &mut bn.running_mean,
                    "running_var" => &mut bn.running_var,
                    _ => return None,
                };
                Some(slice_mut(v))
            }
        }
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        for (enc, cache) in self.encoders.iter_mut().zip(&pass.caches) {
            for (bn, stats) in [(&mut enc.bn0, &cache.bn0_stats), (&mut enc.bn1, &cache.bn1.stats), (&mut enc.bn2, &cache.bn2.stats)] {
                let Some(s) = stats else { continue };
                let n = s.count as f64;
                let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for i in 0..bn.len() {
                    bn.running_mean[i] = (1.0 - BN_MOMENTUM) * bn.running_mean[i] + BN_MOMENTUM * s.mean[i];
                    bn.running_var[i] = (1.0 - BN_MOMENTUM) * bn.running_var[i] + BN_MOMENTUM * s.var[i] * correction;
                }
            }
        }
    }

    /// Copy with every tensor rounded through f32, i.e. what a checkpoint stores.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        for n in names {
            for v in out.tensor_mut(&n).expect("known tensor") {
                *v = *v as f32 as f64;
            }
        }
        out
    }
}

fn slice(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}
fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}
fn slice_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}
fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One input plane per encoder, each `[B, F, C, T]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Array4<f32>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    /// Present in train mode only.
    pub stats: Option<BnStats>,
    pub inv_std: Vec<f64>,
    /// Normalized input before scale and shift.
    pub xhat: Vec<f64>,
}

/// Intermediate values of one encoder pass, enough for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    batch: usize,
    bn0_stats: Option<BnStats>,
    bn0_mean: Vec<f64>,
    bn0_inv_std: Vec<f64>,
    pub bn1: BnCache,
    z1: Vec<f64>,
    pooled: Vec<f64>,
    depthwise_out: Vec<f64>,
    pub bn2: BnCache,
    z2: Vec<f64>,
}

impl EncoderCache {
    pub fn bn0_batch_stats(&self) -> Option<&BnStats> {
        self.bn0_stats.as_ref()
    }
}

#[inline]
fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// ELU with unit scale: `x` for `x >= 0`, `exp(x) - 1` otherwise.
pub fn elu_scalar(x: f64) -> f64 {
    elu(x)
}

pub fn elu_derivative(x: f64) -> f64 {
    elu_grad(x)
}

/// Batch norm over `[B, maps, inner]`, statistics per map.
fn bn_forward(x: &[f64], batch: usize, maps: usize, inner: usize, bn: &BatchNorm, mode: Mode) -> (Vec<f64>, BnCache) {
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let count = batch * inner;
            let mut mean = vec![0.0; maps];
            let mut var = vec![0.0; maps];
            for m in 0..maps {
                let mut s = 0.0;
                for b in 0..batch {
                    let base = (b * maps + m) * inner;
                    s += x[base..base + inner].iter().sum::<f64>();
                }
                let mu = s / count as f64;
                let mut v = 0.0;
                for b in 0..batch {
                    let base = (b * maps + m) * inner;
                    v += x[base..base + inner].iter().map(|&u| (u - mu) * (u - mu)).sum::<f64>();
                }
                mean[m] = mu;
                var[m] = v / count as f64;
            }
            let stats = BnStats { mean: mean.clone(), var: var.clone(), count };
            (mean, var, Some(stats))
        }
        Mode::Eval => (bn.running_mean.to_vec(), bn.running_var.to_vec(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut z = vec![0.0; x.len()];
    for b in 0..batch {
        for m in 0..maps {
            let base = (b * maps + m) * inner;
            let (mu, is, g, be) = (mean[m], inv_std[m], bn.gamma[m], bn.beta[m]);
            for i in base..base + inner {
                let h = (x[i] - mu) * is;
                xhat[i] = h;
                z[i] = g * h + be;
            }
        }
    }
    (z, BnCache { stats, inv_std, xhat })
}

/// Train-mode batch norm backward. Returns `(dx, dgamma, dbeta)`.
fn bn_backward(dz: &[f64], cache: &BnCache, batch: usize, maps: usize, inner: usize, bn: &BatchNorm) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (batch * inner) as f64;
    let mut dgamma = vec![0.0; maps];
    let mut dbeta = vec![0.0; maps];
    for b in 0..batch {
        for m in 0..maps {
            let base = (b * maps + m) * inner;
            for (d, x) in dz[base..base + inner].iter().zip(&cache.xhat[base..base + inner]) {
                dgamma[m] += d * x;
                dbeta[m] += d;
            }
        }
    }
    let mut dx = vec![0.0; dz.len()];
    for b in 0..batch {
        for m in 0..maps {
            let base = (b * maps + m) * inner;
            let g = bn.gamma[m];
            // dxhat = g * dz; sums of dxhat and dxhat*xhat are g*dbeta and g*dgamma
            let (s1, s2) = (g * dbeta[m], g * dgamma[m]);
            let k = cache.inv_std[m] / n;
            for i in base..base + inner {
                dx[i] = k * (n * g * dz[i] - s1 - cache.xhat[i] * s2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batch norm backward: an affine map per channel.
fn bn_backward_eval(dz: &[f64], cache: &BnCache, batch: usize, maps: usize, inner: usize, bn: &BatchNorm) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; maps];
    let mut dbeta = vec![0.0; maps];
    let mut dx = vec![0.0; dz.len()];
    for b in 0..batch {
        for m in 0..maps {
            let base = (b * maps + m) * inner;
            let k = bn.gamma[m] * cache.inv_std[m];
            for i in base..base + inner {
                dgamma[m] += dz[i] * cache.xhat[i];
                dbeta[m] += dz[i];
                dx[i] = k * dz[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn check_input(x: &ArrayView4<f32>, cfg: &EncoderConfig) -> Result<usize> {
    let (b, f, c, t) = x.dim();
    if b == 0 || (f, c, t) != (cfg.n_freq, cfg.n_channels, cfg.n_time) {
        return Err(Error::shape(
            "encoder input",
            format!("[B>=1, {}, {}, {}]", cfg.n_freq, cfg.n_channels, cfg.n_time),
            format!("[{b}, {f}, {c}, {t}]"),
        ));
    }
    Ok(b)
}

/// Per-map mean and biased variance of the raw input over `(B, C, T)`.
fn input_stats(x: &[f32], batch: usize, maps: usize, inner: usize) -> BnStats {
    let count = batch * inner;
    let mut mean = vec![0.0; maps];
    let mut var = vec![0.0; maps];
    for m in 0..maps {
        let mut s = 0.0;
        for b in 0..batch {
            let base = (b * maps + m) * inner;
            s += x[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / count as f64;
        let mut v = 0.0;
        for b in 0..batch {
            let base = (b * maps + m) * inner;
            v += x[base..base + inner]
                .iter()
                .map(|&u| (u as f64 - mu) * (u as f64 - mu))
                .sum::<f64>();
        }
        mean[m] = mu;
        var[m] = v / count as f64;
    }
    BnStats { mean, var, count }
}

/// Runs one encoder. Output is `[B, flat_dim]`.
pub fn encoder_forward(x: ArrayView4<f32>, p: &EncoderParams, cfg: &EncoderConfig, mode: Mode) -> Result<(Array2<f64>, EncoderCache)> {
    let batch = check_input(&x, cfg)?;
    let xs = x.as_slice().ok_or_else(|| Error::InvalidConfig("encoder input must be contiguous".into()))?;
    let (nf, nc, nt) = (cfg.n_freq, cfg.n_channels, cfg.n_time);
    let maps = cfg.filter_maps();
    let (se, le) = cfg.filtered_extent();

    // stage 1
    let (bn0_mean, bn0_var, bn0_stats) = match mode {
        Mode::Train => {
            let s = input_stats(xs, batch, nf, nc * nt);
            (s.mean.clone(), s.var.clone(), Some(s))
        }
        Mode::Eval => (p.bn0.running_mean.to_vec(), p.bn0.running_var.to_vec(), None),
    };
    let bn0_inv_std: Vec<f64> = bn0_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    // stage 2
    let inner2 = se * le;
    let mut y2 = vec![0.0; batch * maps * inner2];
    let kl = cfg.filter_kernel_len();
    let w = p.filter.as_slice().expect("contiguous");
    let mut zrow = vec![0.0; nt];
    for b in 0..batch {
        for f in 0..nf {
            let (mu, is, g, be) = (bn0_mean[f], bn0_inv_std[f], p.bn0.gamma[f], p.bn0.beta[f]);
            for c in 0..nc {
                let xrow = &xs[((b * nf + f) * nc + c) * nt..][..nt];
                for (z, &v) in zrow.iter_mut().zip(xrow) {
                    *z = g * ((v as f64 - mu) * is) + be;
                }
                match cfg.filter_axis {
                    FilterAxis::Spatial => {
                        for o in [2 * f, 2 * f + 1] {
                            let wt = w[o * kl + c];
                            let out = &mut y2[(b * maps + o) * inner2..][..nt];
                            out.iter_mut().zip(&zrow).for_each(|(y, z)| *y += wt * z);
                        }
                    }
                    FilterAxis::Frequency => {
                        for o in 0..maps {
                            let wt = w[o * kl + f];
                            let out = &mut y2[(b * maps + o) * inner2 + c * nt..][..nt];
                            out.iter_mut().zip(&zrow).for_each(|(y, z)| *y += wt * z);
                        }
                    }
                    FilterAxis::Temporal => {
                        for o in [2 * f, 2 * f + 1] {
                            let wrow = &w[o * kl..][..nt];
                            y2[(b * maps + o) * inner2 + c] = wrow.iter().zip(&zrow).map(|(a, z)| a * z).sum();
                        }
                    }
                }
            }
        }
    }

    // stage 3
    let (z1, bn1) = bn_forward(&y2, batch, maps, inner2, &p.bn1, mode);
    let a1: Vec<f64> = z1.iter().map(|&v| elu(v)).collect();

    // stage 4
    let pool = cfg.effective_pool();
    let lp = le / pool;
    let rows = batch * maps * se;
    let mut pooled = vec![0.0; rows * lp];
    for r in 0..rows {
        for l in 0..lp {
            pooled[r * lp + l] = a1[r * le + l * pool..][..pool].iter().sum::<f64>() / pool as f64;
        }
    }

    // stage 5
    let kt = cfg.temporal_kernel;
    let pad = (kt - 1) / 2;
    let dw = p.depthwise.as_slice().expect("contiguous");
    let mut depthwise_out = vec![0.0; rows * lp];
    for r in 0..rows {
        let m = (r / se) % maps;
        let wk = &dw[m * kt..][..kt];
        let src = &pooled[r * lp..][..lp];
        let dst = &mut depthwise_out[r * lp..][..lp];
        for (l, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &wv) in wk.iter().enumerate() {
                let j = l + k;
                if j >= pad && j - pad < lp {
                    acc += wv * src[j - pad];
                }
            }
            *d = acc;
        }
    }

    // stage 6
    let q_maps = cfg.mix_maps;
    let inner6 = se * lp;
    let mw = p.mix_weight.as_slice().expect("contiguous");
    let mut mixed = vec![0.0; batch * q_maps * inner6];
    for b in 0..batch {
        for q in 0..q_maps {
            let out = &mut mixed[(b * q_maps + q) * inner6..][..inner6];
            out.iter_mut().for_each(|v| *v = p.mix_bias[q]);
            for m in 0..maps {
                let wt = mw[q * maps + m];
                let src = &depthwise_out[(b * maps + m) * inner6..][..inner6];
                out.iter_mut().zip(src).for_each(|(o, s)| *o += wt * s);
            }
        }
    }

    // stage 7, 8
    let (z2, bn2) = bn_forward(&mixed, batch, q_maps, inner6, &p.bn2, mode);
    let out: Vec<f64> = z2.iter().map(|&v| elu(v)).collect();
    let out = Array2::from_shape_vec((batch, cfg.flat_dim()), out).expect("flat_dim matches stage layout");

    Ok((
        out,
        EncoderCache {
            batch,
            bn0_stats,
            bn0_mean,
            bn0_inv_std,
            bn1,
            z1,
            pooled,
            depthwise_out,
            bn2,
            z2,
        },
    ))
}

/// Backward pass of one encoder given the gradient of its flattened output.
/// Input gradients are not formed; the input is data.
pub fn encoder_backward(
    x: ArrayView4<f32>,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    cache: &EncoderCache,
    dout: &[f64],
    mode: Mode,
) -> EncoderParams {
    let batch = cache.batch;
    let xs = x.as_slice().expect("contiguous input");
    let (nf, nc, nt) = (cfg.n_freq, cfg.n_channels, cfg.n_time);
    let maps = cfg.filter_maps();
    let (se, le) = cfg.filtered_extent();
    let pool = cfg.effective_pool();
    let lp = le / pool;
    let q_maps = cfg.mix_maps;
    let inner6 = se * lp;
    let inner2 = se * le;
    let rows = batch * maps * se;
    let mut g = p.zeros_like();
    let bn_back = match mode {
        Mode::Train => bn_backward,
        Mode::Eval => bn_backward_eval,
    };

    // stage 7
    let dz2: Vec<f64> = dout.iter().zip(&cache.z2).map(|(d, &z)| d * elu_grad(z)).collect();
    let (dmixed, dg2, db2) = bn_back(&dz2, &cache.bn2, batch, q_maps, inner6, &p.bn2);
    g.bn2.gamma = dg2.into();
    g.bn2.beta = db2.into();

    // stage 6
    let mw = p.mix_weight.as_slice().expect("contiguous");
    let mut ddw = vec![0.0; rows * lp];
    {
        let gmw = g.mix_weight.as_slice_mut().expect("contiguous");
        for b in 0..batch {
            for q in 0..q_maps {
                let dq = &dmixed[(b * q_maps + q) * inner6..][..inner6];
                g.mix_bias[q] += dq.iter().sum::<f64>();
                for m in 0..maps {
                    let src = &cache.depthwise_out[(b * maps + m) * inner6..][..inner6];
                    gmw[q * maps + m] += dq.iter().zip(src).map(|(a, s)| a * s).sum::<f64>();
                    let wt = mw[q * maps + m];
                    let dst = &mut ddw[(b * maps + m) * inner6..][..inner6];
                    dst.iter_mut().zip(dq).for_each(|(d, a)| *d += wt * a);
                }
            }
        }
    }

    // stage 5
    let kt = cfg.temporal_kernel;
    let pad = (kt - 1) / 2;
    let dw = p.depthwise.as_slice().expect("contiguous");
    let mut dpooled = vec![0.0; rows * lp];
    {
        let gdw = g.depthwise.as_slice_mut().expect("contiguous");
        for r in 0..rows {
            let m = (r / se) % maps;
            let src = &cache.pooled[r * lp..][..lp];
            let dsrc = &mut dpooled[r * lp..][..lp];
            let dd = &ddw[r * lp..][..lp];
            for (l, &dv) in dd.iter().enumerate() {
                for k in 0..kt {
                    let j = l + k;
                    if j >= pad && j - pad < lp {
                        gdw[m * kt + k] += dv * src[j - pad];
                        dsrc[j - pad] += dv * dw[m * kt + k];
                    }
                }
            }
        }
    }

    // stage 4, 3
    let mut dz1 = vec![0.0; rows * le];
    for r in 0..rows {
        for l in 0..le {
            let i = r * le + l;
            dz1[i] = dpooled[r * lp + l / pool] / pool as f64 * elu_grad(cache.z1[i]);
        }
    }
    let (dy2, dg1, db1) = bn_back(&dz1, &cache.bn1, batch, maps, inner2, &p.bn1);
    g.bn1.gamma = dg1.into();
    g.bn1.beta = db1.into();

    // stage 2, 1
    let kl = cfg.filter_kernel_len();
    let w = p.filter.as_slice().expect("contiguous");
    let gw = g.filter.as_slice_mut().expect("contiguous");
    let mut xhat = vec![0.0; nt];
    let mut zrow = vec![0.0; nt];
    let mut dzrow = vec![0.0; nt];
    for b in 0..batch {
        for f in 0..nf {
            let (mu, is, gm, be) = (cache.bn0_mean[f], cache.bn0_inv_std[f], p.bn0.gamma[f], p.bn0.beta[f]);
            for c in 0..nc {
                let xrow = &xs[((b * nf + f) * nc + c) * nt..][..nt];
                for ((h, z), &v) in xhat.iter_mut().zip(zrow.iter_mut()).zip(xrow) {
                    *h = (v as f64 - mu) * is;
                    *z = gm * *h + be;
                }
                dzrow.iter_mut().for_each(|v| *v = 0.0);
                match cfg.filter_axis {
                    FilterAxis::Spatial => {
                        for o in [2 * f, 2 * f + 1] {
                            let dy = &dy2[(b * maps + o) * inner2..][..nt];
                            gw[o * kl + c] += dy.iter().zip(&zrow).map(|(a, z)| a * z).sum::<f64>();
                            let wt = w[o * kl + c];
                            dzrow.iter_mut().zip(dy).for_each(|(d, a)| *d += wt * a);
                        }
                    }
                    FilterAxis::Frequency => {
                        for o in 0..maps {
                            let dy = &dy2[(b * maps + o) * inner2 + c * nt..][..nt];
                            gw[o * kl + f] += dy.iter().zip(&zrow).map(|(a, z)| a * z).sum::<f64>();
                            let wt = w[o * kl + f];
                            dzrow.iter_mut().zip(dy).for_each(|(d, a)| *d += wt * a);
                        }
                    }
                    FilterAxis::Temporal => {
                        for o in [2 * f, 2 * f + 1] {
                            let dy = dy2[(b * maps + o) * inner2 + c];
                            let grow = &mut gw[o * kl..][..nt];
                            grow.iter_mut().zip(&zrow).for_each(|(gv, z)| *gv += dy * z);
                            let wrow = &w[o * kl..][..nt];
                            dzrow.iter_mut().zip(wrow).for_each(|(d, wv)| *d += dy * wv);
                        }
                    }
                }
                g.bn0.gamma[f] += dzrow.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>();
                g.bn0.beta[f] += dzrow.iter().sum::<f64>();
            }
        }
    }
    g
}

/// Output of a full model pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Array2<f64>,
    /// Concatenated encoder features, `[B, n_encoders * flat_dim]`.
    pub features: Array2<f64>,
    pub caches: Vec<EncoderCache>,
    pub mode: Mode,
}

fn check_batch(b: &Batch, m: &ModelParams) -> Result<()> {
    if b.inputs.len() != m.config.n_encoders {
        return Err(Error::shape("encoder inputs", m.config.n_encoders, b.inputs.len()));
    }
    for x in &b.inputs {
        if x.dim().0 != b.labels.len() {
            return Err(Error::shape("batch size", b.labels.len(), x.dim().0));
        }
    }
    Ok(())
}

/// Logits `[B, n_classes]`; no softmax.
pub fn model_forward(b: &Batch, m: &ModelParams, mode: Mode) -> Result<ForwardPass> {
    check_batch(b, m)?;
    let cfg = &m.config.encoder;
    let flat = cfg.flat_dim();
    let batch = b.len();
    let mut features = Array2::zeros((batch, m.config.head_inputs()));
    let mut caches = Vec::with_capacity(m.encoders.len());
    for (e, (x, p)) in b.inputs.iter().zip(&m.encoders).enumerate() {
        let (out, cache) = encoder_forward(x.view(), p, cfg, mode)?;
        features
            .slice_mut(ndarray::s![.., e * flat..(e + 1) * flat])
            .assign(&out);
        caches.push(cache);
    }
    let logits = features.dot(&m.head_weight.t()) + &m.head_bias;
    Ok(ForwardPass { logits, features, caches, mode })
}

/// Parameter gradients given the gradient of the loss w.r.t. the logits.
pub fn model_backward(b: &Batch, m: &ModelParams, pass: &ForwardPass, dlogits: &Array2<f64>) -> Gradients {
    let mut g = m.zeros_like();
    g.head_weight = dlogits.t().dot(&pass.features);
    g.head_bias = dlogits.sum_axis(ndarray::Axis(0));
    let dfeat = dlogits.dot(&m.head_weight);
    let flat = m.config.encoder.flat_dim();
    for (e, ((x, p), cache)) in b.inputs.iter().zip(&m.encoders).zip(&pass.caches).enumerate() {
        let dout = dfeat.slice(ndarray::s![.., e * flat..(e + 1) * flat]).to_owned();
        let dout = dout.as_slice().expect("owned slice is contiguous");
        g.encoders[e] = encoder_backward(x.view(), p, &m.config.encoder, cache, dout, pass.mode);
    }
    g
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`) and its
/// gradient `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (batch, k) = logits.dim();
    assert_eq!(batch, labels.len(), "one label per row");
    let mut grad = Array2::zeros((batch, k));
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        assert!(y < k, "label {y} out of range for {k} classes");
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        let log_z = mx + sum.ln();
        loss += log_z - row[y];
        for j in 0..k {
            grad[(i, j)] = (row[j] - log_z).exp() / batch as f64;
        }
        grad[(i, y)] -= 1.0 / batch as f64;
    }
    (loss / batch as f64, grad)
}

/// Train-mode loss, gradients and the pass that produced them.
pub fn loss_and_grad(b: &Batch, m: &ModelParams) -> Result<(f64, Gradients, ForwardPass)> {
    let pass = model_forward(b, m, Mode::Train)?;
    let (loss, dlogits) = cross_entropy(&pass.logits, &b.labels);
    let grads = model_backward(b, m, &pass, &dlogits);
    Ok((loss, grads, pass))
}

/// Index of the largest logit per row, lowest index on ties.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Checkpoint: magic, config block, then named tensors
/// (`u32 name_len, name, u32 ndim, u32 dims.., f32 payload`).
pub fn save_checkpoint(m: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let e = &m.config.encoder;
    for v in [e.n_freq, e.n_channels, e.n_time, e.pool_len, e.temporal_kernel, e.mix_maps] {
        put_u32(&mut w, u32_dim(v, "encoder config")?)?;
    }
    w.write_all(&[e.filter_axis.code()])?;
    put_u32(&mut w, u32_dim(m.config.n_encoders, "n_encoders")?)?;
    put_u32(&mut w, u32_dim(m.config.n_classes, "n_classes")?)?;
    put_u64(&mut w, m.seed)?;
    let tensors = m.named_tensors();
    put_u32(&mut w, u32_dim(tensors.len(), "n_tensors")?)?;
    for (name, dims, data) in tensors {
        put_u32(&mut w, u32_dim(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, u32_dim(dims.len(), "ndim")?)?;
        for d in dims {
            put_u32(&mut w, u32_dim(d, "dim")?)?;
        }
        let narrowed: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        put_raw_f32s(&mut w, &narrowed)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = LeReader::new(BufReader::new(File::open(path)?), "checkpoint");
    let magic: [u8; 8] = r.bytes()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let filter_axis = FilterAxis::from_code(r.u8()?)?;
    let encoder = EncoderConfig {
        n_freq: dims[0],
        n_channels: dims[1],
        n_time: dims[2],
        pool_len: dims[3],
        temporal_kernel: dims[4],
        mix_maps: dims[5],
        filter_axis,
    };
    let config = ModelConfig {
        encoder,
        n_encoders: r.u32()? as usize,
        n_classes: r.u32()? as usize,
    };
    let seed = r.u64()?;
    let mut m = ModelParams::init(config, seed)?;
    let expected: Vec<(String, Vec<usize>)> = m.named_tensors().into_iter().map(|(n, d, _)| (n, d)).collect();
    let n_tensors = r.u32()? as usize;
    if n_tensors != expected.len() {
        return Err(Error::Format(format!("checkpoint has {n_tensors} tensors, config implies {}", expected.len())));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..n_tensors {
        let len = r.u32()? as usize;
        let mut raw = vec![0u8; len];
        r.fill(&mut raw)?;
        let name = String::from_utf8(raw).map_err(|_| Error::Format("tensor name is not utf8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let want = expected
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
        if want.1 != shape {
            return Err(Error::shape(format!("tensor {name}"), format!("{:?}", want.1), format!("{shape:?}")));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        let data = r.f32s(shape.iter().product())?;
        let dst = m.tensor_mut(&name).expect("name checked above");
        dst.iter_mut().zip(data).for_each(|(d, v)| *d = v as f64);
    }
    Ok(m)
}
