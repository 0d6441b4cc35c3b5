//! Whole-dataset spectrogram store and batch assembly.
//!
//! Trials are normalized, transformed on a frequency band and kept as f32
//! planes so a desk-scale dataset fits in memory. Batches are assembled on
//! demand in one of several input forms, optionally with an occlusion mask
//! that keeps a single time window or a single frequency map.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{put_raw_f32s, LeReader};
use crate::error::{Error, Result};
use crate::mst::{self, amp_angle, band_indices, MstParams, MstPlan};
use crate::network::{ArchConfig, Batch, EncoderConfig};
use crate::signal::{sidecar_path, LabeledDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Real,
    Imag,
    Amplitude,
    Angle,
}

/// Which planes feed the encoders, one plane per encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputForm {
    RealImagParallel,
    AmpAngleParallel,
    RealOnly,
    ImagOnly,
    AmpOnly,
}

impl InputForm {
    pub const ALL: [InputForm; 5] = [
        InputForm::RealImagParallel,
        InputForm::AmpAngleParallel,
        InputForm::RealOnly,
        InputForm::ImagOnly,
        InputForm::AmpOnly,
    ];

    pub fn planes(self) -> &'static [Plane] {
        match self {
            InputForm::RealImagParallel => &[Plane::Real, Plane::Imag],
            InputForm::AmpAngleParallel => &[Plane::Amplitude, Plane::Angle],
            InputForm::RealOnly => &[Plane::Real],
            InputForm::ImagOnly => &[Plane::Imag],
            InputForm::AmpOnly => &[Plane::Amplitude],
        }
    }

    pub fn n_encoders(self) -> usize {
        self.planes().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            InputForm::RealImagParallel => "real_imag_parallel",
            InputForm::AmpAngleParallel => "amp_angle_parallel",
            InputForm::RealOnly => "real_only",
            InputForm::ImagOnly => "imag_only",
            InputForm::AmpOnly => "amp_only",
        }
    }
}

impl FromStr for InputForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InputForm::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown input form {s:?}")))
    }
}

impl fmt::Display for InputForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Occlusion applied to the complex values before any plane is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Keep time columns in `start..end`; everything else is zeroed.
    TimeRange { start: usize, end: usize },
    /// Keep one frequency map by grid index.
    SingleFrequency(usize),
}

impl Mask {
    /// Kept time columns `[lo, hi)` of frequency row `f`; empty when the
    /// row is masked out.
    fn kept_columns(self, f: usize, n_time: usize) -> (usize, usize) {
        match self {
            Mask::None => (0, n_time),
            Mask::TimeRange { start, end } => (start.min(n_time), end.min(n_time).max(start.min(n_time))),
            Mask::SingleFrequency(k) if k == f => (0, n_time),
            Mask::SingleFrequency(_) => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDataset {
    pub n_freq: usize,
    pub n_channels: usize,
    pub n_time: usize,
    pub freq_grid_hz: Vec<f64>,
    pub sample_rate_hz: f64,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Per trial, `[n_freq, n_channels, n_time]` row-major.
    pub re: Vec<Vec<f32>>,
    pub im: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheSidecar {
    labels: Vec<usize>,
    n_classes: usize,
}

impl SpectralDataset {
    /// Normalizes every trial against its background and transforms it on
    /// the grid bins inside `[f_lo, f_hi]`.
    pub fn from_dataset(ds: &LabeledDataset, p: &MstParams, f_lo: f64, f_hi: f64) -> Result<Self> {
        p.validate()?;
        let (n_channels, n_time, _) = ds.dims();
        let grid = p.freq_grid();
        let keep = band_indices(&grid, f_lo, f_hi)?;
        let freqs: Vec<f64> = keep.iter().map(|&i| grid[i]).collect();
        let plan = MstPlan::new(n_time.max(1), &freqs, p);
        let planes = ds
            .trials
            .par_iter()
            .map(|t| {
                let x = t.normalized()?;
                let (re, im) = mst::transform_with_plan(&x, &plan);
                Ok((
                    re.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
                    im.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (re, im) = planes.into_iter().unzip();
        Ok(Self {
            n_freq: freqs.len(),
            n_channels,
            n_time,
            freq_grid_hz: freqs,
            sample_rate_hz: ds.sample_rate_hz(),
            labels: ds.labels(),
            n_classes: ds.n_classes,
            re,
            im,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn plane_len(&self) -> usize {
        self.n_freq * self.n_channels * self.n_time
    }

    /// Keeps the bins with `f_lo <= f <= f_hi`.
    pub fn crop(&self, f_lo: f64, f_hi: f64) -> Result<Self> {
        let keep = band_indices(&self.freq_grid_hz, f_lo, f_hi)?;
        let block = self.n_channels * self.n_time;
        let pick = |v: &Vec<f32>| -> Vec<f32> { keep.iter().flat_map(|&k| v[k * block..(k + 1) * block].iter().copied()).collect() };
        Ok(Self {
            n_freq: keep.len(),
            freq_grid_hz: keep.iter().map(|&k| self.freq_grid_hz[k]).collect(),
            re: self.re.iter().map(pick).collect(),
            im: self.im.iter().map(pick).collect(),
            labels: self.labels.clone(),
            n_channels: self.n_channels,
            n_time: self.n_time,
            sample_rate_hz: self.sample_rate_hz,
            n_classes: self.n_classes,
        })
    }

    /// Encoder configuration matching this store's dimensions.
    pub fn encoder_config(&self, arch: &ArchConfig) -> EncoderConfig {
        arch.encoder(self.n_freq, self.n_channels, self.n_time)
    }

    /// Assembles `[B, F, C, T]` planes for the trials in `idx`.
    pub fn batch(&self, idx: &[usize], form: InputForm, mask: Mask) -> Batch {
        let (nf, nc, nt) = (self.n_freq, self.n_channels, self.n_time);
        let plane = self.plane_len();
        let inputs = form
            .planes()
            .iter()
            .map(|&which| {
                let mut out = vec![0f32; idx.len() * plane];
                for (slot, &i) in idx.iter().enumerate() {
                    let (re, im) = (&self.re[i], &self.im[i]);
                    let dst = &mut out[slot * plane..(slot + 1) * plane];
                    for f in 0..nf {
                        let (lo, hi) = mask.kept_columns(f, nt);
                        if lo == hi {
                            continue;
                        }
                        for c in 0..nc {
                            let span = (f * nc + c) * nt + lo..(f * nc + c) * nt + hi;
                            let d = &mut dst[span.clone()];
                            match which {
                                Plane::Real => d.copy_from_slice(&re[span]),
                                Plane::Imag => d.copy_from_slice(&im[span]),
                                Plane::Amplitude => d
                                    .iter_mut()
                                    .zip(&re[span.clone()])
                                    .zip(&im[span])
                                    .for_each(|((o, &r), &m)| *o = (r as f64).hypot(m as f64) as f32),
                                Plane::Angle => d
                                    .iter_mut()
                                    .zip(&re[span.clone()])
                                    .zip(&im[span])
                                    .for_each(|((o, &r), &m)| *o = amp_angle(r as f64, m as f64).1 as f32),
                            }
                        }
                    }
                }
                Array4::from_shape_vec((idx.len(), nf, nc, nt), out).expect("plane length matches dims")
            })
            .collect();
        Batch {
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Writes the planes in the spectrogram cache format plus a JSON sidecar
    /// with the labels.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        mst::write_spectrogram_header(
            &mut w,
            self.len(),
            Some(((self.n_freq, self.n_channels, self.n_time), &self.freq_grid_hz[..], self.sample_rate_hz)),
        )?;
        for (re, im) in self.re.iter().zip(&self.im) {
            put_raw_f32s(&mut w, re)?;
            put_raw_f32s(&mut w, im)?;
        }
        w.flush()?;
        let side = CacheSidecar {
            labels: self.labels.clone(),
            n_classes: self.n_classes,
        };
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = LeReader::new(BufReader::new(File::open(path)?), "spectrogram cache");
        let h = mst::read_spectrogram_header(&mut r)?;
        let side: CacheSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        if side.labels.len() != h.n_items {
            return Err(Error::shape("cache labels", h.n_items, side.labels.len()));
        }
        if let Some(&bad) = side.labels.iter().find(|&&l| l >= side.n_classes) {
            return Err(Error::Format(format!("label {bad} out of range for {} classes", side.n_classes)));
        }
        let len = h.dims.0 * h.dims.1 * h.dims.2;
        let mut re = Vec::with_capacity(h.n_items);
        let mut im = Vec::with_capacity(h.n_items);
        for _ in 0..h.n_items {
            re.push(r.f32s(len)?);
            im.push(r.f32s(len)?);
        }
        if !r.at_end()? {
            return Err(Error::Format("trailing bytes in spectrogram cache".into()));
        }
        Ok(Self {
            n_freq: h.dims.0,
            n_channels: h.dims.1,
            n_time: h.dims.2,
            freq_grid_hz: h.grid,
            sample_rate_hz: h.sample_rate_hz,
            labels: side.labels,
            n_classes: side.n_classes,
            re,
            im,
        })
    }
}
