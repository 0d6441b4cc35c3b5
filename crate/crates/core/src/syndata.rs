//! Synthetic multi-channel recordings with planted, recoverable structure.
//!
//! Class `k` owns a unit spatial pattern `p_k`, a carrier `f_k` and a phase
//! `phi_k`. From the onset sample `L` on, every trial of class `k` carries
//! `A * p_k[c] * sin(2 pi f_k (t - L) / fs + phi_k)` on channel `c`, on top
//! of white noise. The background interval is noise only.
//!
//! `A = sqrt(2 C)` so the planted power averaged over channels is 1 and the
//! noise standard deviation is `10^(-snr_db / 20)`.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::signal::{ChannelTimeMatrix, LabeledDataset, Trial};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub n_channels: usize,
    pub n_time: usize,
    pub n_background_time: usize,
    pub sample_rate_hz: f64,
    pub onset_ms: f64,
    /// Length of the planted response; `None` runs it to the end of the trial.
    pub response_ms: Option<f64>,
    pub carrier_hz: Vec<f64>,
    /// Infinite means noise off; stored as `null` in JSON.
    #[serde(serialize_with = "ser_snr", deserialize_with = "de_snr")]
    pub snr_db: f64,
    /// Classes 0 and 1 share carrier, pattern and amplitude; class 1 is
    /// shifted by a quarter period.
    pub phase_coded: bool,
    pub seed: u64,
}

fn ser_snr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn de_snr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            trials_per_class: 20,
            n_channels: 128,
            n_time: 300,
            n_background_time: 300,
            sample_rate_hz: 1000.0,
            onset_ms: 50.0,
            response_ms: None,
            carrier_hz: vec![8.0, 12.0, 16.0, 20.0, 24.0, 28.0],
            snr_db: 10.0,
            phase_coded: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn onset_samples(&self) -> usize {
        (self.onset_ms * self.sample_rate_hz / 1000.0).round() as usize
    }

    /// End (exclusive) of the planted response in samples.
    pub fn response_end(&self) -> usize {
        match self.response_ms {
            Some(ms) => (self.onset_samples() + (ms * self.sample_rate_hz / 1000.0).round() as usize).min(self.n_time),
            None => self.n_time,
        }
    }

    pub fn amplitude(&self) -> f64 {
        (2.0 * self.n_channels as f64).sqrt()
    }

    pub fn noise_std(&self) -> f64 {
        if self.snr_db == f64::INFINITY {
            0.0
        } else {
            10f64.powf(-self.snr_db / 20.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(2..=256).contains(&self.n_classes) {
            return bad(format!("n_classes must be in 2..=256, got {}", self.n_classes));
        }
        if self.trials_per_class == 0 || self.n_channels == 0 || self.n_time == 0 || self.n_background_time == 0 {
            return bad("trials_per_class, n_channels, n_time and n_background_time must be positive".into());
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad(format!("sample_rate_hz must be positive, got {}", self.sample_rate_hz));
        }
        if !(self.onset_ms >= 0.0) || self.onset_samples() >= self.n_time {
            return bad(format!("onset_ms {} must fall inside the {}-sample trial", self.onset_ms, self.n_time));
        }
        if let Some(r) = self.response_ms {
            if !(r > 0.0) {
                return bad(format!("response_ms must be positive, got {r}"));
            }
        }
        if self.carrier_hz.len() != self.n_classes {
            return bad(format!("carrier_hz has {} entries for {} classes", self.carrier_hz.len(), self.n_classes));
        }
        if let Some(f) = self.carrier_hz.iter().find(|f| !(5.0..=45.0).contains(*f)) {
            return bad(format!("carrier {f} Hz outside [5, 45]"));
        }
        for i in 0..self.n_classes {
            for j in i + 1..self.n_classes {
                // the phase pair's second carrier is replaced by the first
                let tied = self.phase_coded && (i, j) == (0, 1);
                if !tied && self.carrier_hz[i] == self.carrier_hz[j] {
                    return bad(format!("classes {i} and {j} share carrier {} Hz", self.carrier_hz[i]));
                }
            }
        }
        if self.snr_db.is_nan() {
            return bad("snr_db is NaN".into());
        }
        Ok(())
    }
}

/// Everything planted by [`generate`], stored in the dataset sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Unit spatial pattern per class.
    pub patterns: Vec<Vec<f64>>,
    /// Effective carrier per class after the phase pair is tied.
    pub carriers_hz: Vec<f64>,
    pub phases_rad: Vec<f64>,
    pub onset_ms: f64,
    pub onset_samples: usize,
    pub response_end: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    pub phase_pair: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GeneratorRecord {
    config: SynthConfig,
    truth: GroundTruth,
}

/// Gaussian vectors orthonormalized in draw order; once `k >= C` a fresh draw
/// can no longer be orthogonal and is only normalized.
fn spatial_patterns(rng: &mut ChaCha8Rng, k: usize, c: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut v: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        if i < c {
            for u in &out[..i.min(out.len())] {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        out.push(v);
    }
    out
}

pub fn ground_truth(cfg: &SynthConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut patterns = spatial_patterns(&mut rng, cfg.n_classes, cfg.n_channels);
    let mut phases: Vec<f64> = (0..cfg.n_classes).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut carriers = cfg.carrier_hz.clone();
    let phase_pair = cfg.phase_coded.then_some((0, 1));
    if let Some((a, b)) = phase_pair {
        patterns[b] = patterns[a].clone();
        carriers[b] = carriers[a];
        phases[b] = phases[a] + FRAC_PI_2;
    }
    Ok(GroundTruth {
        patterns,
        carriers_hz: carriers,
        phases_rad: phases,
        onset_ms: cfg.onset_ms,
        onset_samples: cfg.onset_samples(),
        response_end: cfg.response_end(),
        amplitude: cfg.amplitude(),
        noise_std: cfg.noise_std(),
        phase_pair,
    })
}

/// Label of trial `i`; classes are interleaved.
pub fn trial_label(i: usize, n_classes: usize) -> usize {
    i % n_classes
}

/// Builds the dataset. Trial `i` draws its noise from stream `i + 1` of the
/// seed, so trials are independent of generation order.
pub fn generate(cfg: &SynthConfig) -> Result<LabeledDataset> {
    let truth = ground_truth(cfg)?;
    let n_trials = cfg.n_classes * cfg.trials_per_class;
    let (c, t, tb) = (cfg.n_channels, cfg.n_time, cfg.n_background_time);
    let sigma = truth.noise_std;
    let fs = cfg.sample_rate_hz;
    let trials = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let label = trial_label(i, cfg.n_classes);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let noise = |rng: &mut ChaCha8Rng| -> f64 {
                if sigma == 0.0 {
                    0.0
                } else {
                    sigma * rng.sample::<f64, _>(StandardNormal)
                }
            };
            let (p, f, phi) = (&truth.patterns[label], truth.carriers_hz[label], truth.phases_rad[label]);
            let mut active = Array2::zeros((c, t));
            for ch in 0..c {
                for s in 0..t {
                    let mut v = noise(&mut rng);
                    if s >= truth.onset_samples && s < truth.response_end {
                        let tau = (s - truth.onset_samples) as f64;
                        v += truth.amplitude * p[ch] * (2.0 * PI * f * tau / fs + phi).sin();
                    }
                    active[(ch, s)] = v as f32 as f64;
                }
            }
            let background = Array2::from_shape_simple_fn((c, tb), || noise(&mut rng) as f32 as f64);
            Trial::new(ChannelTimeMatrix::new(active, fs)?, ChannelTimeMatrix::new(background, fs)?, label)
        })
        .collect::<Result<Vec<_>>>()?;
    let names = (0..cfg.n_classes).map(|k| format!("class{k}")).collect();
    let mut ds = LabeledDataset::new(trials, cfg.n_classes, names, cfg.seed)?;
    ds.generator = Some(serde_json::to_value(GeneratorRecord {
        config: cfg.clone(),
        truth,
    })?);
    Ok(ds)
}

/// Planted truth recorded in a generated dataset, if any.
pub fn recorded_truth(ds: &LabeledDataset) -> Option<(SynthConfig, GroundTruth)> {
    let rec: GeneratorRecord = serde_json::from_value(ds.generator.clone()?).ok()?;
    Some((rec.config, rec.truth))
}
