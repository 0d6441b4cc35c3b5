//! Occlusion importance and the ablation experiments built on the trainer.
//!
//! A trained model is evaluated on copies of the spectrogram batches where
//! everything outside one time window, or every map but one frequency, is
//! zeroed. The stored spectrograms are never modified.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ArchConfig, ModelParams};
use crate::spectral::{InputForm, Mask, SpectralDataset};
use crate::trainer::{cross_validate, evaluate, CvReport, Split, TrainConfig};

/// Margin above chance that counts as "carries information".
pub const INFO_THRESHOLD: f64 = 0.1;
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveAxis {
    Time,
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceCurve {
    pub axis: CurveAxis,
    /// Window start sample, or retained frequency in Hz.
    pub index: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Accuracy per position restricted to each true class,
    /// `class_accuracy[position][class]`.
    pub class_accuracy: Vec<Vec<f64>>,
    pub baseline_accuracy: f64,
    pub chance: f64,
    pub window: usize,
    pub stride: usize,
    pub threshold: f64,
}

impl ImportanceCurve {
    /// Position of the first entry above `chance + threshold`.
    pub fn first_above_threshold(&self) -> Option<usize> {
        self.accuracy.iter().position(|&a| a > self.chance + self.threshold)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,accuracy\n");
        for (i, a) in self.index.iter().zip(&self.accuracy) {
            let _ = writeln!(s, "{i},{a}");
        }
        s
    }

    /// Line plot with dashed baseline and dotted chance references.
    pub fn to_svg(&self) -> String {
        let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 20.0, 20.0, 50.0);
        let (pw, ph) = (w - ml - mr, h - mt - mb);
        let (x0, x1) = match (self.index.first(), self.index.last()) {
            (Some(&a), Some(&b)) if b > a => (a, b),
            (Some(&a), _) => (a - 1.0, a + 1.0),
            _ => (0.0, 1.0),
        };
        let px = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| mt + (1.0 - y.clamp(0.0, 1.0)) * ph;
        let xlabel = match self.axis {
            CurveAxis::Time => "window start (samples)",
            CurveAxis::Frequency => "retained frequency (Hz)",
        };
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, mt + ph, ml + pw, mt + ph);
        let _ = writeln!(s, r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#, mt + ph);
        for tick in 0..=5 {
            let y = tick as f64 / 5.0;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y:.1}</text>"#, ml - 6.0, py(y) + 4.0);
        }
        for tick in 0..=4 {
            let x = x0 + (x1 - x0) * tick as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x:.0}</text>"#, px(x), mt + ph + 16.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, ml + pw / 2.0, h - 10.0);
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">accuracy</text>"#,
            mt + ph / 2.0,
            mt + ph / 2.0
        );
        for (y, dash, color, label) in [
            (self.baseline_accuracy, "6 4", "#2a7", "baseline"),
            (self.chance, "2 3", "#a33", "chance"),
        ] {
            let _ = writeln!(
                s,
                r#"<line x1="{ml}" y1="{0}" x2="{1}" y2="{0}" stroke="{color}" stroke-dasharray="{dash}"/><text x="{2}" y="{3}" fill="{color}" text-anchor="end">{label}</text>"#,
                py(y),
                ml + pw,
                ml + pw - 2.0,
                py(y) - 4.0
            );
        }
        let pts: Vec<String> = self
            .index
            .iter()
            .zip(&self.accuracy)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#236" stroke-width="1.5" points="{}"/>"##, pts.join(" "));
        s.push_str("</svg>\n");
        s
    }
}

/// Window starts `0, stride, ...` up to `n_time - window`, with the last
/// admissible start appended when the stride skips it, so every sample is
/// covered.
pub fn window_starts(n_time: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || window > n_time {
        return Err(Error::InvalidConfig(format!("window {window} must be in 1..={n_time}")));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be >= 1".into()));
    }
    let last = n_time - window;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    Ok(out)
}

fn curve_from(
    model: &ModelParams,
    sd: &SpectralDataset,
    idx: &[usize],
    form: InputForm,
    axis: CurveAxis,
    positions: Vec<(f64, Mask)>,
) -> Result<ImportanceCurve> {
    let baseline = evaluate(model, sd, idx, form, Mask::None)?.accuracy;
    let k = model.config.n_classes;
    let evals = positions
        .par_iter()
        .map(|&(_, mask)| evaluate(model, sd, idx, form, mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceCurve {
        axis,
        index: positions.iter().map(|p| p.0).collect(),
        accuracy: evals.iter().map(|e| e.accuracy).collect(),
        class_accuracy: evals.iter().map(|e| (0..k).map(|c| e.class_accuracy(c)).collect()).collect(),
        baseline_accuracy: baseline,
        chance: 1.0 / k as f64,
        threshold: INFO_THRESHOLD,
        window: 1,
        stride: 1,
    })
}

/// Accuracy when only time columns `[t, t + window)` are kept.
pub fn temporal_importance(
    model: &ModelParams,
    sd: &SpectralDataset,
    idx: &[usize],
    form: InputForm,
    window: usize,
    stride: usize,
) -> Result<ImportanceCurve> {
    let positions = window_starts(sd.n_time, window, stride)?
        .into_iter()
        .map(|t| (t as f64, Mask::TimeRange { start: t, end: t + window }))
        .collect();
    let curve = curve_from(model, sd, idx, form, CurveAxis::Time, positions)?;
    Ok(ImportanceCurve { window, stride, ..curve })
}

/// Accuracy when only one frequency map is kept, for every map.
pub fn frequency_importance(model: &ModelParams, sd: &SpectralDataset, idx: &[usize], form: InputForm) -> Result<ImportanceCurve> {
    let positions = sd
        .freq_grid_hz
        .iter()
        .enumerate()
        .map(|(i, &f)| (f, Mask::SingleFrequency(i)))
        .collect();
    curve_from(model, sd, idx, form, CurveAxis::Frequency, positions)
}

/// Curve of each fold model on its own held-out trials, pooled into accuracy
/// over every held-out trial. One model's occlusion response is noisy; the
/// pooled curve is what a cross-validated run reports.
pub fn pooled_importance(
    models: &[ModelParams],
    splits: &[Split],
    sd: &SpectralDataset,
    form: InputForm,
    axis: CurveAxis,
    window: usize,
    stride: usize,
) -> Result<ImportanceCurve> {
    if models.is_empty() || models.len() != splits.len() {
        return Err(Error::InvalidConfig(format!("{} models for {} splits", models.len(), splits.len())));
    }
    let mut pooled: Option<ImportanceCurve> = None;
    let mut class_totals = vec![0usize; sd.n_classes];
    let mut total = 0usize;
    for (m, (_, val)) in models.iter().zip(splits) {
        let curve = match axis {
            CurveAxis::Time => temporal_importance(m, sd, val, form, window, stride)?,
            CurveAxis::Frequency => frequency_importance(m, sd, val, form)?,
        };
        let mut counts = vec![0usize; sd.n_classes];
        val.iter().for_each(|&i| counts[sd.labels[i]] += 1);
        let n = val.len() as f64;
        let acc = pooled.get_or_insert_with(|| ImportanceCurve {
            accuracy: vec![0.0; curve.accuracy.len()],
            class_accuracy: vec![vec![0.0; sd.n_classes]; curve.accuracy.len()],
            baseline_accuracy: 0.0,
            ..curve.clone()
        });
        // sums of correct predictions until the final division
        acc.baseline_accuracy += curve.baseline_accuracy * n;
        for (j, a) in curve.accuracy.iter().enumerate() {
            acc.accuracy[j] += a * n;
            for (c, ca) in curve.class_accuracy[j].iter().enumerate() {
                acc.class_accuracy[j][c] += ca * counts[c] as f64;
            }
        }
        total += val.len();
        class_totals.iter_mut().zip(&counts).for_each(|(t, c)| *t += c);
    }
    let mut out = pooled.expect("at least one fold");
    let n = total.max(1) as f64;
    out.baseline_accuracy /= n;
    out.accuracy.iter_mut().for_each(|a| *a /= n);
    for row in &mut out.class_accuracy {
        row.iter_mut().zip(&class_totals).for_each(|(a, &t)| *a /= t.max(1) as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub f_hi_hz: f64,
    pub n_freq: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Not deterministic; kept out of the CSV.
    pub wall_seconds: f64,
}

/// Cross-validates a fresh single-encoder model on each band `[f_lo, f_hi]`.
pub fn frequency_range_sweep(
    sd: &SpectralDataset,
    f_lo: f64,
    ranges: &[f64],
    form: InputForm,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(Vec<SweepRow>, Vec<CvReport>)> {
    if form.n_encoders() != 1 {
        return Err(Error::InvalidConfig(format!("sweep uses one encoder; {form} has {}", form.n_encoders())));
    }
    let mut rows = Vec::with_capacity(ranges.len());
    let mut reports = Vec::with_capacity(ranges.len());
    for &hi in ranges {
        let band = sd.crop(f_lo, hi)?;
        let start = Instant::now();
        let out = cross_validate(&band, form, arch, cfg)?;
        rows.push(SweepRow {
            f_hi_hz: hi,
            n_freq: band.n_freq,
            mean_accuracy: out.report.mean_accuracy,
            std_accuracy: out.report.std_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        reports.push(out.report);
    }
    Ok((rows, reports))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("f_hi_hz,n_freq,mean_accuracy,std_accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.f_hi_hz, r.n_freq, r.mean_accuracy, r.std_accuracy);
    }
    s
}

/// Cross-validates every form on the same split and seed.
pub fn compare_forms(sd: &SpectralDataset, forms: &[InputForm], arch: &ArchConfig, cfg: &TrainConfig) -> Result<Vec<CvReport>> {
    forms.iter().map(|&f| cross_validate(sd, f, arch, cfg).map(|o| o.report)).collect()
}

pub fn compare_csv(reports: &[CvReport]) -> String {
    let mut s = String::from("mode,mean_accuracy,std_accuracy\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{}", r.form, r.mean_accuracy, r.std_accuracy);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_every_sample() {
        let s = window_starts(300, 5, 5).unwrap();
        assert_eq!(s.len(), (300usize - 5).div_ceil(5) + 1);
        assert_eq!(*s.last().unwrap(), 295);
        let mut covered = vec![false; 300];
        for &t in &s {
            covered[t..t + 5].iter_mut().for_each(|c| *c = true);
        }
        assert!(covered.iter().all(|&c| c));
        assert_eq!(window_starts(300, 5, 1).unwrap().len(), 296);
        assert_eq!(window_starts(10, 10, 3).unwrap(), vec![0]);
        assert!(window_starts(10, 11, 1).is_err());
        assert!(window_starts(10, 2, 0).is_err());
    }

    #[test]
    fn first_above_threshold_uses_chance_margin() {
        let c = ImportanceCurve {
            axis: CurveAxis::Time,
            index: vec![0.0, 5.0, 10.0],
            accuracy: vec![0.26, 0.27, 0.5],
            class_accuracy: vec![],
            baseline_accuracy: 0.9,
            chance: 1.0 / 6.0,
            window: 5,
            stride: 5,
            threshold: INFO_THRESHOLD,
        };
        assert_eq!(c.first_above_threshold(), Some(1));
        assert_eq!(c.to_csv(), "index,accuracy\n0,0.26\n5,0.27\n10,0.5\n");
        let svg = c.to_svg();
        assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.contains("chance") && svg.contains("baseline"));
    }
}
