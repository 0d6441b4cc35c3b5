//! Modified S-transform.
//!
//! The window at frequency `f` is a Gaussian whose standard deviation is
//! `alpha(f)` seconds, with `alpha(f) = 1 / (a * atan((f - f_max/2) / b) + c)`.
//! Discretely, the window is sampled over the full circular lag range of the
//! signal and rescaled to unit sum, so
//!
//! ```text
//! MST[t, f] = sum_tau x[tau] * g_f[(tau - t) mod N] * exp(-j 2 pi f tau / fs)
//! ```
//!
//! and summing a row over `t` returns the plain demodulated sum of the signal.
//! [`mst_direct`] evaluates that sum for one point; [`MstPlan`] evaluates
//! whole rows as a circular correlation in the DFT domain, one demodulation
//! per grid frequency so the grid need not line up with DFT bins.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_f64, put_u32, u32_dim, LeReader};
use crate::error::{Error, Result};
use crate::signal::ChannelTimeMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MstParams {
    pub a: f64,
    /// Hz.
    pub b: f64,
    pub c: f64,
    pub f_max_hz: u32,
    pub sample_rate_hz: f64,
    pub freq_step_hz: f64,
}

impl Default for MstParams {
    fn default() -> Self {
        Self {
            a: 5.0,
            b: 50.0,
            c: 74.0,
            f_max_hz: 128,
            sample_rate_hz: 1000.0,
            freq_step_hz: 1.0,
        }
    }
}

impl MstParams {
    pub fn validate(&self) -> Result<()> {
        // |a * atan(.)| < |a| * pi / 2, so this keeps the window width positive everywhere.
        if !(self.c > self.a.abs() * PI / 2.0) {
            return Err(Error::InvalidConfig(format!(
                "mst: c = {} must exceed |a|*pi/2 = {}",
                self.c,
                self.a.abs() * PI / 2.0
            )));
        }
        if !(self.b.is_finite() && self.b != 0.0) {
            return Err(Error::InvalidConfig(format!("mst: b must be non-zero, got {}", self.b)));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("mst: sample_rate_hz must be positive, got {}", self.sample_rate_hz)));
        }
        if f64::from(self.f_max_hz) > self.sample_rate_hz / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "mst: f_max_hz = {} exceeds Nyquist {}",
                self.f_max_hz,
                self.sample_rate_hz / 2.0
            )));
        }
        if !(self.freq_step_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("mst: freq_step_hz must be positive, got {}", self.freq_step_hz)));
        }
        Ok(())
    }

    /// `floor(f_max / step) + 1` bins, starting at 0 Hz.
    pub fn n_freq(&self) -> usize {
        (f64::from(self.f_max_hz) / self.freq_step_hz + 1e-9).floor() as usize + 1
    }

    pub fn freq_grid(&self) -> Vec<f64> {
        (0..self.n_freq()).map(|i| i as f64 * self.freq_step_hz).collect()
    }
}

/// Window standard deviation in seconds.
pub fn alpha(f_hz: f64, p: &MstParams) -> f64 {
    let centre = f64::from(p.f_max_hz) / 2.0;
    1.0 / (p.a * ((f_hz - centre) / p.b).atan() + p.c)
}

/// Circular Gaussian window for `n` lags, unit sum. Entry `k` is lag `k`
/// (equivalently `k - n`).
pub fn window(f_hz: f64, n: usize, p: &MstParams) -> Vec<f64> {
    let sigma = alpha(f_hz, p) * p.sample_rate_hz;
    let denom = 2.0 * sigma * sigma;
    let mut g: Vec<f64> = (0..n)
        .map(|k| {
            let d = k.min(n - k) as f64;
            (-d * d / denom).exp()
        })
        .collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    g
}

fn demodulator(f_hz: f64, tau: usize, fs: f64) -> Complex64 {
    let (s, c) = (-2.0 * PI * f_hz * tau as f64 / fs).sin_cos();
    Complex64::new(c, s)
}

/// Direct evaluation of the transform at one `(t, f)` point, O(N).
pub fn mst_direct(x: &[f64], t_idx: usize, f_hz: f64, p: &MstParams) -> Complex64 {
    let n = x.len();
    assert!(t_idx < n, "t_idx {t_idx} out of range for length {n}");
    let g = window(f_hz, n, p);
    x.iter()
        .enumerate()
        .map(|(tau, &v)| v * g[(tau + n - t_idx) % n] * demodulator(f_hz, tau, p.sample_rate_hz))
        .sum()
}

/// Precomputed windows, demodulators and FFT plans for one signal length and
/// frequency list. Reusable across channels and trials.
pub struct MstPlan {
    n: usize,
    freqs: Vec<f64>,
    demod: Vec<Vec<Complex64>>,
    /// conj(DFT(g_f)) / n, so one multiply and an unnormalized inverse finish the job.
    window_spectra: Vec<Vec<Complex64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch_len: usize,
}

impl MstPlan {
    pub fn new(n: usize, freqs: &[f64], p: &MstParams) -> Self {
        assert!(n > 0, "empty signal");
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::default(); scratch_len];
        let scale = 1.0 / n as f64;

        let demod = freqs
            .iter()
            .map(|&f| (0..n).map(|tau| demodulator(f, tau, p.sample_rate_hz)).collect())
            .collect();
        let window_spectra = freqs
            .iter()
            .map(|&f| {
                let mut g: Vec<Complex64> = window(f, n, p).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
                fwd.process_with_scratch(&mut g, &mut scratch);
                g.into_iter().map(|z| z.conj() * scale).collect()
            })
            .collect();

        Self {
            n,
            freqs: freqs.to_vec(),
            demod,
            window_spectra,
            fwd,
            inv,
            scratch_len,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Calls `sink(freq_index, row)` with the length-N transform row of each
    /// planned frequency.
    pub fn for_each_row(&self, x: &[f64], mut sink: impl FnMut(usize, &[Complex64])) {
        assert_eq!(x.len(), self.n, "signal length does not match plan");
        let mut buf = vec![Complex64::default(); self.n];
        let mut scratch = vec![Complex64::default(); self.scratch_len];
        for (fi, (demod, wspec)) in self.demod.iter().zip(&self.window_spectra).enumerate() {
            for ((b, &v), d) in buf.iter_mut().zip(x).zip(demod) {
                *b = d * v;
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for (b, w) in buf.iter_mut().zip(wspec) {
                *b *= w;
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            sink(fi, &buf);
        }
    }

    /// `[n_freq x N]` transform of one signal.
    pub fn apply(&self, x: &[f64]) -> Array2<Complex64> {
        let mut out = Array2::zeros((self.freqs.len(), self.n));
        self.for_each_row(x, |fi, row| {
            out.row_mut(fi)
                .iter_mut()
                .zip(row)
                .for_each(|(o, &v)| *o = v);
        });
        out
    }
}

/// Transform of one signal on the full grid of `p`, `[n_freq x N]`.
pub fn mst_fast(x: &[f64], p: &MstParams) -> Array2<Complex64> {
    MstPlan::new(x.len(), &p.freq_grid(), p).apply(x)
}

/// Complex frequency x channel x time volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub re: Array3<f64>,
    pub im: Array3<f64>,
    pub freq_grid_hz: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl ComplexSpectrogram {
    pub fn new(re: Array3<f64>, im: Array3<f64>, freq_grid_hz: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::shape("spectrogram imaginary plane", format!("{:?}", re.dim()), format!("{:?}", im.dim())));
        }
        if freq_grid_hz.len() != re.dim().0 {
            return Err(Error::shape("frequency grid", re.dim().0, freq_grid_hz.len()));
        }
        if freq_grid_hz.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("frequency grid must be strictly increasing".into()));
        }
        Ok(Self { re, im, freq_grid_hz, sample_rate_hz })
    }

    /// `(n_freq, n_channels, n_time)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.re.dim()
    }
}

/// Grid indices with `lo <= f <= hi`.
pub fn band_indices(grid: &[f64], lo: f64, hi: f64) -> Result<Vec<usize>> {
    let idx: Vec<usize> = grid
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= lo && f <= hi)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        Err(Error::EmptyRange { lo, hi })
    } else {
        Ok(idx)
    }
}

/// Transform every channel of an (already normalized) trial on the full grid.
pub fn transform_trial(trial: &ChannelTimeMatrix, p: &MstParams) -> Result<ComplexSpectrogram> {
    transform_trial_band(trial, p, 0.0, f64::from(p.f_max_hz))
}

/// Like [`transform_trial`] but only evaluates grid bins inside `[f_lo, f_hi]`;
/// equal to cropping the full transform.
pub fn transform_trial_band(trial: &ChannelTimeMatrix, p: &MstParams, f_lo: f64, f_hi: f64) -> Result<ComplexSpectrogram> {
    p.validate()?;
    let grid = p.freq_grid();
    let keep = band_indices(&grid, f_lo, f_hi)?;
    let freqs: Vec<f64> = keep.iter().map(|&i| grid[i]).collect();
    let plan = MstPlan::new(trial.n_time(), &freqs, p);
    let (re, im) = transform_with_plan(trial, &plan);
    ComplexSpectrogram::new(re, im, freqs, trial.sample_rate_hz())
}

pub(crate) fn transform_with_plan(trial: &ChannelTimeMatrix, plan: &MstPlan) -> (Array3<f64>, Array3<f64>) {
    let n_f = plan.freqs().len();
    let (n_c, n_t) = (trial.n_channels(), trial.n_time());
    let mut re = Array3::zeros((n_f, n_c, n_t));
    let mut im = Array3::zeros((n_f, n_c, n_t));
    for c in 0..n_c {
        plan.for_each_row(trial.channel(c), |fi, row| {
            let mut r = re.slice_mut(s![fi, c, ..]);
            let mut i = im.slice_mut(s![fi, c, ..]);
            for (t, z) in row.iter().enumerate() {
                r[t] = z.re;
                i[t] = z.im;
            }
        });
    }
    (re, im)
}

/// Keeps the bins with `f_lo <= f <= f_hi`.
pub fn crop_frequency(s: &ComplexSpectrogram, f_lo: f64, f_hi: f64) -> Result<ComplexSpectrogram> {
    let keep = band_indices(&s.freq_grid_hz, f_lo, f_hi)?;
    let re = s.re.select(Axis(0), &keep);
    let im = s.im.select(Axis(0), &keep);
    let grid = keep.iter().map(|&i| s.freq_grid_hz[i]).collect();
    ComplexSpectrogram::new(re, im, grid, s.sample_rate_hz)
}

/// Polar form of one value; angle in (-pi, pi], and 0 for a zero input.
pub fn amp_angle(re: f64, im: f64) -> (f64, f64) {
    let amp = re.hypot(im);
    if amp == 0.0 {
        return (0.0, 0.0);
    }
    let theta = im.atan2(re);
    (amp, if theta == -PI { PI } else { theta })
}

/// Amplitude and angle planes, same shape as the input.
pub fn to_amp_angle(s: &ComplexSpectrogram) -> (Array3<f64>, Array3<f64>) {
    let mut amp = Array3::zeros(s.re.dim());
    let mut ang = Array3::zeros(s.re.dim());
    ndarray::Zip::from(&mut amp)
        .and(&mut ang)
        .and(&s.re)
        .and(&s.im)
        .for_each(|a, g, &r, &i| {
            let (m, th) = amp_angle(r, i);
            *a = m;
            *g = th;
        });
    (amp, ang)
}

pub const SPECTROGRAM_MAGIC: &[u8; 8] = b"MSTSPEC1";

/// Spectrogram cache: magic, `u32 n_items, n_freq, n_channels, n_time`,
/// `f64 sample_rate_hz`, `f64[n_freq]` grid, then per item the re plane and
/// the im plane as f32 in frequency-channel-time order.
pub fn save_spectrograms(path: &Path, items: &[ComplexSpectrogram]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_spectrogram_header(&mut w, items.len(), items.first().map(|s| (s.dim(), &s.freq_grid_hz[..], s.sample_rate_hz)))?;
    for s in items {
        put_f32s(&mut w, s.re.iter().copied())?;
        put_f32s(&mut w, s.im.iter().copied())?;
    }
    w.flush()?;
    Ok(())
}

/// Dimensions, frequency grid and sample rate of a cache's items.
pub(crate) type CacheShape<'a> = ((usize, usize, usize), &'a [f64], f64);

pub(crate) fn write_spectrogram_header<W: Write>(
    w: &mut W,
    n_items: usize,
    shape: Option<CacheShape<'_>>,
) -> Result<()> {
    let ((n_f, n_c, n_t), grid, fs) = shape.unwrap_or(((0, 0, 0), &[], 0.0));
    w.write_all(SPECTROGRAM_MAGIC)?;
    put_u32(w, u32_dim(n_items, "n_items")?)?;
    put_u32(w, u32_dim(n_f, "n_freq")?)?;
    put_u32(w, u32_dim(n_c, "n_channels")?)?;
    put_u32(w, u32_dim(n_t, "n_time")?)?;
    put_f64(w, fs)?;
    for &f in grid {
        put_f64(w, f)?;
    }
    Ok(())
}

pub(crate) struct SpectrogramHeader {
    pub n_items: usize,
    pub dims: (usize, usize, usize),
    pub grid: Vec<f64>,
    pub sample_rate_hz: f64,
}

pub(crate) fn read_spectrogram_header<R: std::io::Read>(r: &mut LeReader<R>) -> Result<SpectrogramHeader> {
    let magic: [u8; 8] = r.bytes()?;
    if &magic != SPECTROGRAM_MAGIC {
        return Err(Error::Format(format!("bad spectrogram magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let n_items = r.u32()? as usize;
    let dims = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let sample_rate_hz = r.f64()?;
    let grid = (0..dims.0).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Ok(SpectrogramHeader { n_items, dims, grid, sample_rate_hz })
}

pub fn load_spectrograms(path: &Path) -> Result<Vec<ComplexSpectrogram>> {
    let mut r = LeReader::new(BufReader::new(File::open(path)?), "spectrogram cache");
    let h = read_spectrogram_header(&mut r)?;
    let len = h.dims.0 * h.dims.1 * h.dims.2;
    let mut out = Vec::with_capacity(h.n_items);
    for _ in 0..h.n_items {
        let mut re = Vec::with_capacity(len);
        r.f32s_into(&mut re, len)?;
        let mut im = Vec::with_capacity(len);
        r.f32s_into(&mut im, len)?;
        let re = Array3::from_shape_vec(h.dims, re).map_err(|e| Error::Format(e.to_string()))?;
        let im = Array3::from_shape_vec(h.dims, im).map_err(|e| Error::Format(e.to_string()))?;
        out.push(ComplexSpectrogram::new(re, im, h.grid.clone(), h.sample_rate_hz)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> MstParams {
        MstParams::default()
    }

    #[test]
    fn alpha_at_band_centre_is_inverse_c() {
        assert_abs_diff_eq!(alpha(64.0, &p()), 1.0 / 74.0, epsilon = 1e-15);
    }

    #[test]
    fn alpha_at_zero() {
        // independent evaluation of the closed form
        let expected = 1.0 / (5.0 * (-1.28f64).atan() + 74.0);
        assert_abs_diff_eq!(alpha(0.0, &p()), expected, epsilon = 1e-15);
        assert!(expected > 0.0);
        assert!(alpha(0.0, &p()) > alpha(64.0, &p()));
        assert!(alpha(64.0, &p()) > alpha(128.0, &p()));
    }

    #[test]
    fn alpha_positive_on_fine_sweep() {
        let params = p();
        for i in 0..=1280 {
            let f = i as f64 * 0.1;
            assert!(alpha(f, &params) > 0.0, "alpha({f}) not positive");
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut bad = p();
        bad.c = 7.0;
        assert!(bad.validate().is_err());
        let mut bad = p();
        bad.f_max_hz = 600;
        assert!(bad.validate().is_err());
        let mut bad = p();
        bad.freq_step_hz = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn window_has_unit_sum_and_is_symmetric() {
        for n in [5, 16, 300, 301] {
            let g = window(17.0, n, &p());
            assert_abs_diff_eq!(g.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for k in 1..n {
                assert_eq!(g[k], g[n - k]);
            }
        }
    }

    #[test]
    fn zero_signal_gives_zero() {
        let x = vec![0.0; 40];
        assert_eq!(mst_direct(&x, 7, 12.0, &p()), Complex64::new(0.0, 0.0));
        assert!(mst_fast(&x, &p()).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn constant_signal_at_dc_is_one() {
        let x = vec![1.0; 64];
        for t in [0, 13, 63] {
            let z = mst_direct(&x, t, 0.0, &p());
            assert_abs_diff_eq!(z.re, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(z.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cosine_regression_values() {
        // Frozen from an independent numpy evaluation of the defining sum.
        let x: Vec<f64> = (0..300).map(|t| (2.0 * PI * 10.0 * t as f64 / 1000.0).cos()).collect();
        let on = mst_direct(&x, 150, 10.0, &p());
        let off = mst_direct(&x, 150, 40.0, &p());
        assert_abs_diff_eq!(on.norm(), COS10_AT_10HZ, epsilon = 1e-12);
        assert_abs_diff_eq!(off.norm(), COS10_AT_40HZ, epsilon = 1e-12);
        // the -10 Hz image lifts the on-carrier value above 0.5 at this t
        assert!(on.norm() > 0.5 && on.norm() < 0.7);
        assert!(off.norm() < 0.05);
    }

    const COS10_AT_10HZ: f64 = 0.599259937995361;
    const COS10_AT_40HZ: f64 = 0.01591242221727504;

    #[test]
    fn fast_matches_direct_on_random_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 64;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = MstParams { f_max_hz: 32, ..p() };
        let fast = mst_fast(&x, &params);
        for (fi, f) in params.freq_grid().into_iter().enumerate() {
            for t in 0..n {
                let d = mst_direct(&x, t, f, &params);
                assert!((fast[(fi, t)] - d).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_row_is_reversed_window_times_phase() {
        let n = 50;
        let mut x = vec![0.0; n];
        x[0] = 1.0;
        let fast = mst_fast(&x, &p());
        for (fi, f) in p().freq_grid().into_iter().enumerate().step_by(9) {
            let g = window(f, n, &p());
            for t in 0..n {
                // tau = 0, so the demodulator is 1 and only g[-t] survives
                let expected = g[(n - t) % n];
                assert_abs_diff_eq!(fast[(fi, t)].re, expected, epsilon = 1e-13);
                assert_abs_diff_eq!(fast[(fi, t)].im, 0.0, epsilon = 1e-13);
                assert!((mst_direct(&x, t, f, &p()) - fast[(fi, t)]).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn grid_size_with_defaults() {
        assert_eq!(p().n_freq(), 129);
        let m = ChannelTimeMatrix::new(Array2::zeros((3, 40)), 1000.0).unwrap();
        let s = transform_trial(&m, &p()).unwrap();
        assert_eq!(s.dim(), (129, 3, 40));
        assert!(s.re.iter().chain(s.im.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn crop_counts() {
        let m = ChannelTimeMatrix::new(Array2::from_shape_fn((2, 32), |(c, t)| (c + t) as f64), 1000.0).unwrap();
        let s = transform_trial(&m, &p()).unwrap();
        assert_eq!(crop_frequency(&s, 0.0, 128.0).unwrap(), s);
        assert_eq!(crop_frequency(&s, 0.0, 52.0).unwrap().dim().0, 53);
        assert_eq!(crop_frequency(&s, 0.0, 38.0).unwrap().dim().0, 39);
        assert!(matches!(crop_frequency(&s, 10.2, 10.8), Err(Error::EmptyRange { .. })));
    }

    #[test]
    fn band_transform_equals_crop() {
        let m = ChannelTimeMatrix::new(Array2::from_shape_fn((2, 48), |(c, t)| ((c * 7 + t) as f64).sin()), 1000.0).unwrap();
        let full = transform_trial(&m, &p()).unwrap();
        let band = transform_trial_band(&m, &p(), 3.0, 41.0).unwrap();
        assert_eq!(crop_frequency(&full, 3.0, 41.0).unwrap(), band);
    }

    #[test]
    fn amp_angle_conventions() {
        assert_eq!(amp_angle(0.0, 0.0), (0.0, 0.0));
        assert_eq!(amp_angle(-0.0, -0.0), (0.0, 0.0));
        let (a, th) = amp_angle(1.0, 1.0);
        assert_abs_diff_eq!(a, 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(th, PI / 4.0, epsilon = 1e-15);
        assert_eq!(amp_angle(-1.0, -0.0).1, PI);
        assert_eq!(amp_angle(-1.0, 0.0).1, PI);
    }

    #[test]
    fn amp_angle_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let re = Array3::from_shape_fn((4, 3, 10), |_| rng.random_range(-3.0..3.0));
        let im = Array3::from_shape_fn((4, 3, 10), |_| rng.random_range(-3.0..3.0));
        let s = ComplexSpectrogram::new(re, im, vec![0.0, 1.0, 2.0, 3.0], 1000.0).unwrap();
        let (amp, ang) = to_amp_angle(&s);
        for (((a, th), r), i) in amp.iter().zip(&ang).zip(&s.re).zip(&s.im) {
            assert!(*th > -PI && *th <= PI);
            assert_abs_diff_eq!(a * th.cos(), *r, epsilon = 1e-12);
            assert_abs_diff_eq!(a * th.sin(), *i, epsilon = 1e-12);
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let re = Array3::from_shape_fn((2, 2, 3), |(f, c, t)| (f * 6 + c * 3 + t) as f64 * 0.5);
        let im = re.mapv(|v| -v);
        let s = ComplexSpectrogram::new(re, im, vec![4.0, 5.0], 1000.0).unwrap();
        save_spectrograms(&path, &[s.clone(), s.clone()]).unwrap();
        assert_eq!(load_spectrograms(&path).unwrap(), vec![s.clone(), s]);
    }
}
