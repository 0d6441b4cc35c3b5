//! Trial and dataset types, background normalization, and the binary
//! dataset file.
//!
//! File layout (little-endian):
//!
//! ```text
//! "MSTDSET1"  u32 version=1  u32 n_trials  u32 n_channels  u32 n_time
//! u32 n_background_time  u32 n_classes  u64 seed
//! per trial: u8 label, active f32[n_channels * n_time] (channel-major),
//!            background f32[n_channels * n_background_time]
//! ```
//!
//! Class names, the sample rate and any generator config go to the JSON
//! sidecar `<path>.meta.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u32, put_u64, u32_dim, LeReader};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"MSTDSET1";
pub const DATASET_VERSION: u32 = 1;
/// Size of the fixed dataset header in bytes.
pub const DATASET_HEADER_LEN: u64 = 8 + 6 * 4 + 8;
/// Below this the background standard deviation is treated as zero.
pub const BACKGROUND_EPS: f64 = 1e-12;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 1000.0;

/// Real-valued channels x time segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTimeMatrix {
    data: Array2<f64>,
    sample_rate_hz: f64,
}

impl ChannelTimeMatrix {
    pub fn new(data: Array2<f64>, sample_rate_hz: f64) -> Result<Self> {
        let (c, t) = data.dim();
        if c == 0 || t == 0 {
            return Err(Error::shape("ChannelTimeMatrix", "at least 1x1", format!("{c}x{t}")));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("sample_rate_hz must be positive, got {sample_rate_hz}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite sample at channel {}, time {}",
                pos / t,
                pos % t
            )));
        }
        Ok(Self { data, sample_rate_hz })
    }

    pub fn zeros(n_channels: usize, n_time: usize, sample_rate_hz: f64) -> Result<Self> {
        Self::new(Array2::zeros((n_channels, n_time)), sample_rate_hz)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.data.ncols()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    /// Channel `c` as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.n_time();
        &self.data.as_slice().expect("standard layout")[c * t..(c + 1) * t]
    }
}

/// One stimulus presentation: the active interval, the interval preceding it,
/// and the class shown.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub active: ChannelTimeMatrix,
    pub background: ChannelTimeMatrix,
    pub label: usize,
}

impl Trial {
    pub fn new(active: ChannelTimeMatrix, background: ChannelTimeMatrix, label: usize) -> Result<Self> {
        if active.n_channels() != background.n_channels() {
            return Err(Error::shape(
                "background channels",
                active.n_channels(),
                background.n_channels(),
            ));
        }
        Ok(Self { active, background, label })
    }

    /// Active interval normalized against this trial's background.
    pub fn normalized(&self) -> Result<ChannelTimeMatrix> {
        normalize_trial(&self.active, &self.background)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub trials: Vec<Trial>,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    /// Free-form description of how the data was produced; lands in the sidecar.
    pub generator: Option<serde_json::Value>,
}

impl LabeledDataset {
    pub fn new(trials: Vec<Trial>, n_classes: usize, class_names: Vec<String>, seed: u64) -> Result<Self> {
        let ds = Self {
            trials,
            n_classes,
            class_names,
            seed,
            generator: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > 256 {
            return Err(Error::InvalidConfig(format!("n_classes must be in 1..=256, got {}", self.n_classes)));
        }
        if self.class_names.len() != self.n_classes {
            return Err(Error::shape("class_names", self.n_classes, self.class_names.len()));
        }
        if let Some(first) = self.trials.first() {
            let dims = trial_dims(first);
            for (i, t) in self.trials.iter().enumerate() {
                if trial_dims(t) != dims {
                    return Err(Error::shape(format!("trial {i} dims"), format!("{dims:?}"), format!("{:?}", trial_dims(t))));
                }
                if t.label >= self.n_classes {
                    return Err(Error::InvalidConfig(format!(
                        "trial {i} label {} >= n_classes {}",
                        t.label, self.n_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// `(n_channels, n_time, n_background_time)`, zeros when empty.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.trials.first().map(trial_dims).unwrap_or((0, 0, 0))
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.trials
            .first()
            .map(|t| t.active.sample_rate_hz())
            .unwrap_or(DEFAULT_SAMPLE_RATE_HZ)
    }

    /// Trials per class id, including zero counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for t in &self.trials {
            counts[t.label] += 1;
        }
        counts
    }
}

fn trial_dims(t: &Trial) -> (usize, usize, usize) {
    (t.active.n_channels(), t.active.n_time(), t.background.n_time())
}

/// `(active - m) / s` with `m`, `s` the mean and population standard
/// deviation over every element of `background` taken together.
pub fn normalize_trial(active: &ChannelTimeMatrix, background: &ChannelTimeMatrix) -> Result<ChannelTimeMatrix> {
    if active.n_channels() != background.n_channels() {
        return Err(Error::shape(
            "background channels",
            active.n_channels(),
            background.n_channels(),
        ));
    }
    let (mean, sigma) = overall_mean_std(background.data());
    if !(sigma > BACKGROUND_EPS) {
        return Err(Error::DegenerateBackground { sigma, eps: BACKGROUND_EPS });
    }
    let data = active.data().mapv(|v| (v - mean) / sigma);
    ChannelTimeMatrix::new(data, active.sample_rate_hz())
}

/// Mean and population standard deviation over all elements.
pub fn overall_mean_std(data: &Array2<f64>) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    class_names: Vec<String>,
    sample_rate_hz: f64,
    #[serde(default)]
    generator: Option<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the binary dataset and its JSON sidecar. Samples are narrowed to f32.
pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let (n_channels, n_time, n_bg) = ds.dims();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    put_u32(&mut w, DATASET_VERSION)?;
    put_u32(&mut w, u32_dim(ds.trials.len(), "n_trials")?)?;
    put_u32(&mut w, u32_dim(n_channels, "n_channels")?)?;
    put_u32(&mut w, u32_dim(n_time, "n_time")?)?;
    put_u32(&mut w, u32_dim(n_bg, "n_background_time")?)?;
    put_u32(&mut w, u32_dim(ds.n_classes, "n_classes")?)?;
    put_u64(&mut w, ds.seed)?;
    for t in &ds.trials {
        w.write_all(&[t.label as u8])?;
        put_f32s(&mut w, t.active.data().iter().copied())?;
        put_f32s(&mut w, t.background.data().iter().copied())?;
    }
    w.flush()?;

    let sidecar = Sidecar {
        class_names: ds.class_names.clone(),
        sample_rate_hz: ds.sample_rate_hz(),
        generator: ds.generator.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. A missing sidecar falls back
/// to `class<k>` names and a 1 kHz sample rate.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut r = LeReader::new(BufReader::new(File::open(path)?), "dataset");
    let magic: [u8; 8] = r.bytes()?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n_trials = r.u32()? as usize;
    let n_channels = r.u32()? as usize;
    let n_time = r.u32()? as usize;
    let n_bg = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let seed = r.u64()?;

    let side = sidecar_path(path);
    let sidecar: Sidecar = if side.exists() {
        serde_json::from_slice(&std::fs::read(&side)?)?
    } else {
        Sidecar {
            class_names: (0..n_classes).map(|k| format!("class{k}")).collect(),
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            generator: None,
        }
    };

    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let label = r.u8()? as usize;
        let mut active = Vec::with_capacity(n_channels * n_time);
        r.f32s_into(&mut active, n_channels * n_time)?;
        let mut bg = Vec::with_capacity(n_channels * n_bg);
        r.f32s_into(&mut bg, n_channels * n_bg)?;
        let active = ChannelTimeMatrix::new(to_matrix(active, n_channels, n_time)?, sidecar.sample_rate_hz)?;
        let background = ChannelTimeMatrix::new(to_matrix(bg, n_channels, n_bg)?, sidecar.sample_rate_hz)?;
        trials.push(Trial::new(active, background, label)?);
    }
    if !r.at_end()? {
        return Err(Error::Format("trailing bytes after last trial".into()));
    }

    let ds = LabeledDataset {
        trials,
        n_classes,
        class_names: sidecar.class_names,
        seed,
        generator: sidecar.generator,
    };
    ds.validate()?;
    Ok(ds)
}

fn to_matrix(v: Vec<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Format(e.to_string()))
}
