//! Independent oracles shared by the integration and acceptance targets.

#![allow(dead_code)]

use mstdecode::mst::MstParams;
use mstdecode::network::{cross_entropy, model_forward, Batch, EncoderConfig, FilterAxis, Mode, ModelConfig, ModelParams};
use ndarray::Array4;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Window width in samples, written out from the arctangent law.
pub fn oracle_sigma_samples(f: f64, p: &MstParams) -> f64 {
    let alpha = 1.0 / (p.a * ((f - p.f_max_hz as f64 / 2.0) / p.b).atan() + p.c);
    alpha * p.sample_rate_hz
}

/// One MST value by plain summation over the unit-sum circular Gaussian.
pub fn oracle_mst(x: &[f64], t: usize, f: f64, p: &MstParams) -> Complex64 {
    let n = x.len();
    let sigma = oracle_sigma_samples(f, p);
    let raw: Vec<f64> = (0..n)
        .map(|k| {
            let d = k.min(n - k) as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let mut acc = Complex64::new(0.0, 0.0);
    for (tau, &v) in x.iter().enumerate() {
        let lag = (tau + n - t) % n;
        let phase = -2.0 * std::f64::consts::PI * f * tau as f64 / p.sample_rate_hz;
        acc += v * raw[lag] / total * Complex64::new(phase.cos(), phase.sin());
    }
    acc
}

pub fn oracle_demodulated_sum(x: &[f64], f: f64, fs: f64) -> Complex64 {
    x.iter()
        .enumerate()
        .map(|(tau, &v)| {
            let phase = -2.0 * std::f64::consts::PI * f * tau as f64 / fs;
            v * Complex64::new(phase.cos(), phase.sin())
        })
        .sum()
}

pub fn random_signal(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Small encoder used by the gradient checks: F=3, C=4, T=16.
pub fn tiny_encoder(axis: FilterAxis) -> EncoderConfig {
    EncoderConfig {
        n_freq: 3,
        n_channels: 4,
        n_time: 16,
        pool_len: 4,
        temporal_kernel: 3,
        mix_maps: 5,
        filter_axis: axis,
    }
}

pub fn random_batch(cfg: &EncoderConfig, n_encoders: usize, b: usize, n_classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..n_encoders)
        .map(|_| {
            Array4::from_shape_simple_fn((b, cfg.n_freq, cfg.n_channels, cfg.n_time), || {
                rng.random_range(-2.0f32..2.0)
            })
        })
        .collect();
    let labels = (0..b).map(|i| (i * 7 + seed as usize) % n_classes).collect();
    Batch { inputs, labels }
}

/// Model with batch-norm scales and shifts moved off their initial values so
/// their gradients are exercised at a generic point.
pub fn perturbed_model(cfg: EncoderConfig, n_encoders: usize, n_classes: usize, seed: u64) -> ModelParams {
    let mut m = ModelParams::init(ModelConfig { encoder: cfg, n_encoders, n_classes }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for enc in &mut m.encoders {
        for bn in [&mut enc.bn0, &mut enc.bn1, &mut enc.bn2] {
            bn.gamma.mapv_inplace(|_| rng.random_range(0.6..1.4));
            bn.beta.mapv_inplace(|_| rng.random_range(-0.4..0.4));
        }
    }
    m
}

pub fn train_loss(b: &Batch, m: &ModelParams) -> f64 {
    let pass = model_forward(b, m, Mode::Train).unwrap();
    cross_entropy(&pass.logits, &b.labels).0
}

/// Central differences of the train-mode loss for every learnable entry, in
/// `ModelParams::learnable` order.
pub fn finite_difference_gradients(b: &Batch, m: &ModelParams, h: f64) -> Vec<Vec<f64>> {
    let shapes: Vec<usize> = m.learnable().iter().map(|(_, v)| v.len()).collect();
    let mut work = m.clone();
    let mut out = Vec::with_capacity(shapes.len());
    for (ti, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work.learnable_mut()[ti][j];
            work.learnable_mut()[ti][j] = orig + h;
            let up = train_loss(b, &work);
            work.learnable_mut()[ti][j] = orig - h;
            let dn = train_loss(b, &work);
            work.learnable_mut()[ti][j] = orig;
            *gj = (up - dn) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Relative error with a floor on the denominator so entries whose true
/// gradient is zero compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Worst relative error per learnable tensor.
pub fn gradient_report(axis: FilterAxis, seed: u64) -> Vec<(String, f64)> {
    let cfg = tiny_encoder(axis);
    let m = perturbed_model(cfg, 2, 3, seed);
    let b = random_batch(&cfg, 2, 2, 3, seed);
    let (_, grads, _) = mstdecode::network::loss_and_grad(&b, &m).unwrap();
    let numeric = finite_difference_gradients(&b, &m, 1e-5);
    grads
        .learnable()
        .into_iter()
        .zip(numeric)
        .map(|((name, an), nu)| {
            let worst = an.iter().zip(&nu).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
