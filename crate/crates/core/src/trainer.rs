//! Adam, stratified k-fold splitting, the training loop and evaluation.
//!
//! Every random choice in a cross-validation run (split, initialization,
//! batch order) derives from `TrainConfig::seed`, so a run is a pure function
//! of its inputs.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{self, argmax_rows, ArchConfig, Gradients, Mode, ModelConfig, ModelParams};
use crate::spectral::{InputForm, Mask, SpectralDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        Ok(())
    }
}

/// First and second moments per learnable tensor, in
/// [`ModelParams::learnable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.learnable().iter().map(|(_, v)| vec![0.0; v.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One Adam update of a flat tensor at step `t >= 1`, L2 decay folded into
/// the gradient.
pub fn adam_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], cfg: &TrainConfig, t: u64) {
    assert!(t >= 1, "adam step index starts at 1");
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let gi = g[i] + cfg.weight_decay * theta[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        theta[i] -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
    }
}

/// Advances `state.t` and updates every learnable tensor.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    let g = grads.learnable();
    for (i, theta) in params.learnable_mut().into_iter().enumerate() {
        adam_update(theta, g[i].1, &mut state.m[i], &mut state.v[i], cfg, state.t);
    }
}

pub type Split = (Vec<usize>, Vec<usize>);

/// Stratified `k`-fold partition. Each class is shuffled and dealt round
/// robin; the dealing position carries over between classes so fold sizes
/// differ by at most one.
pub fn kfold_split(labels: &[usize], n_classes: usize, k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("folds must be >= 2, got {k}")));
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::InvalidConfig(format!("label {l} out of range for {n_classes} classes")));
        }
        by_class[l].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::TooFewTrials { class, count: members.len(), k });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = vec![Vec::new(); k];
    let mut pos = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            val[pos % k].push(i);
            pos += 1;
        }
    }
    Ok(val
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            let mut in_val = vec![false; labels.len()];
            v.iter().for_each(|&i| in_val[i] = true);
            let train = (0..labels.len()).filter(|&i| !in_val[i]).collect();
            (train, v)
        })
        .collect())
}

/// Model shape for a spectral store, input form and architecture.
pub fn model_config(sd: &SpectralDataset, form: InputForm, arch: &ArchConfig) -> ModelConfig {
    ModelConfig {
        encoder: sd.encoder_config(arch),
        n_encoders: form.n_encoders(),
        n_classes: sd.n_classes,
    }
}

/// Trains one model on `train_idx`. Returns the model and the mean training
/// loss of each epoch.
pub fn train_model(
    sd: &SpectralDataset,
    train_idx: &[usize],
    form: InputForm,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut model = ModelParams::init(model_config(sd, form, arch), rng.next_u64())?;
    let mut state = AdamState::new(&model);
    let mut order = train_idx.to_vec();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = sd.batch(chunk, form, Mask::None);
            let (loss, grads, pass) = network::loss_and_grad(&batch, &model)?;
            model.update_running_stats(&pass);
            adam_step(&mut model, &grads, &mut state, cfg);
            total += loss * chunk.len() as f64;
        }
        curve.push(total / order.len() as f64);
    }
    Ok((model, curve))
}

/// Optimizer steps in one epoch over `n` trials.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    fn from_predictions(labels: &[usize], predictions: Vec<usize>, n_classes: usize) -> Self {
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for (&y, &p) in labels.iter().zip(&predictions) {
            confusion[y][p] += 1;
        }
        let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
        let accuracy = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
        Self { accuracy, confusion, predictions }
    }

    /// Accuracy restricted to trials whose true class is `class`.
    pub fn class_accuracy(&self, class: usize) -> f64 {
        let row = &self.confusion[class];
        let n: usize = row.iter().sum();
        if n == 0 {
            0.0
        } else {
            row[class] as f64 / n as f64
        }
    }
}

const EVAL_CHUNK: usize = 32;

/// Eval-mode accuracy and confusion on `idx` with `mask` applied.
pub fn evaluate(m: &ModelParams, sd: &SpectralDataset, idx: &[usize], form: InputForm, mask: Mask) -> Result<Evaluation> {
    let preds = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let batch = sd.batch(chunk, form, mask);
            let pass = network::model_forward(&batch, m, Mode::Eval)?;
            Ok(argmax_rows(&pass.logits))
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let labels: Vec<usize> = idx.iter().map(|&i| sd.labels[i]).collect();
    Ok(Evaluation::from_predictions(&labels, preds, m.config.n_classes))
}

/// Accuracy and confusion of precomputed logits; lowest index wins ties.
pub fn evaluate_logits(logits: &Array2<f64>, labels: &[usize]) -> Evaluation {
    Evaluation::from_predictions(labels, argmax_rows(logits), logits.ncols())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: usize,
    pub train_loss_curve: Vec<f64>,
    pub val_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub n_train: usize,
    pub n_val: usize,
}

impl FoldReport {
    pub fn loss_final(&self) -> f64 {
        self.train_loss_curve.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub form: InputForm,
    pub arch: ArchConfig,
    pub n_freq: usize,
    pub freq_lo_hz: f64,
    pub freq_hi_hz: f64,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    /// Sample standard deviation across folds.
    pub std_accuracy: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CvReport {
    /// `fold,accuracy,loss_final` rows and a closing mean±std line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,accuracy,loss_final\n");
        for f in &self.folds {
            s.push_str(&format!("{},{},{}\n", f.fold_id, f.val_accuracy, f.loss_final()));
        }
        let (lm, ls) = mean_std(&self.folds.iter().map(FoldReport::loss_final).collect::<Vec<_>>());
        s.push_str(&format!("mean±std,{}±{},{}±{}\n", self.mean_accuracy, self.std_accuracy, lm, ls));
        s
    }
}

/// Result of a cross-validation run: the report and one model per fold.
pub struct CvOutcome {
    pub report: CvReport,
    pub models: Vec<ModelParams>,
    pub splits: Vec<Split>,
}

/// Stratified k-fold cross-validation. Fold `i` shuffles with stream `i + 1`
/// of the seed; folds are independent and may run in parallel.
pub fn cross_validate(sd: &SpectralDataset, form: InputForm, arch: &ArchConfig, cfg: &TrainConfig) -> Result<CvOutcome> {
    cfg.validate()?;
    let splits = kfold_split(&sd.labels, sd.n_classes, cfg.folds, cfg.seed)?;
    let results = splits
        .par_iter()
        .enumerate()
        .map(|(fold, (train, val))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(fold as u64 + 1);
            let (model, curve) = train_model(sd, train, form, arch, cfg, &mut rng)?;
            let ev = evaluate(&model, sd, val, form, Mask::None)?;
            Ok((
                model,
                FoldReport {
                    fold_id: fold,
                    train_loss_curve: curve,
                    val_accuracy: ev.accuracy,
                    confusion: ev.confusion,
                    n_train: train.len(),
                    n_val: val.len(),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (models, folds): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let (mean_accuracy, std_accuracy) = mean_std(&folds.iter().map(|f: &FoldReport| f.val_accuracy).collect::<Vec<_>>());
    Ok(CvOutcome {
        report: CvReport {
            form,
            arch: *arch,
            n_freq: sd.n_freq,
            freq_lo_hz: sd.freq_grid_hz.first().copied().unwrap_or(0.0),
            freq_hi_hz: sd.freq_grid_hz.last().copied().unwrap_or(0.0),
            folds,
            mean_accuracy,
            std_accuracy,
        },
        models,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig { lr, weight_decay: wd, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = scalar_cfg(0.1, 0.0);
        let mut theta = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, &cfg, 1);
        assert_eq!(theta, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let cfg = scalar_cfg(0.1, 0.0);
        let mut theta = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut theta, &[1.0], &mut m, &mut v, &cfg, 1);
        assert_abs_diff_eq!(theta[0], 1.0 - 0.1 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn decay_enters_as_gradient() {
        // with g = 0 the decay term alone drives the first step: lr * sign(theta)
        let cfg = scalar_cfg(0.01, 0.5);
        let mut theta = vec![2.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut theta, &[0.0], &mut m, &mut v, &cfg, 1);
        assert_abs_diff_eq!(theta[0], 2.0 - 0.01 * 1.0 / (1.0 + 1e-8 / 1.0), epsilon = 1e-12);
    }

    #[test]
    fn step_bounded_by_lr_under_constant_gradient() {
        let cfg = scalar_cfg(0.05, 0.0);
        let mut theta = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for t in 1..=200 {
            let before = theta[0];
            adam_update(&mut theta, &[3.0], &mut m, &mut v, &cfg, t);
            let step = before - theta[0];
            assert!(step > 0.0 && step <= 0.05 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn kfold_exact_stratification() {
        let labels: Vec<usize> = (0..30).map(|i| i % 6).collect();
        let splits = kfold_split(&labels, 6, 5, 3).unwrap();
        assert_eq!(splits.len(), 5);
        let mut seen = [0; 30];
        for (train, val) in &splits {
            let mut counts = [0; 6];
            val.iter().for_each(|&i| counts[labels[i]] += 1);
            assert_eq!(counts, [1; 6]);
            assert_eq!(train.len() + val.len(), 30);
            val.iter().for_each(|&i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn kfold_seeded() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let a = kfold_split(&labels, 3, 5, 1).unwrap();
        assert_eq!(a, kfold_split(&labels, 3, 5, 1).unwrap());
        assert_ne!(a, kfold_split(&labels, 3, 5, 2).unwrap());
    }

    #[test]
    fn kfold_too_few() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1];
        assert!(matches!(
            kfold_split(&labels, 2, 5, 0),
            Err(Error::TooFewTrials { class: 1, count: 3, k: 5 })
        ));
    }

    #[test]
    fn ties_go_to_class_zero() {
        let logits = Array2::zeros((6, 6));
        let labels: Vec<usize> = (0..6).collect();
        let ev = evaluate_logits(&logits, &labels);
        assert_abs_diff_eq!(ev.accuracy, 1.0 / 6.0, epsilon = 1e-15);
        assert!(ev.predictions.iter().all(|&p| p == 0));
    }

    #[test]
    fn oracle_logits_are_perfect_and_trace_matches() {
        let labels = vec![2, 0, 1, 1, 2];
        let mut logits = Array2::zeros((5, 3));
        for (i, &l) in labels.iter().enumerate() {
            logits[(i, l)] = 1.0;
        }
        logits[(4, 0)] = 2.0;
        let ev = evaluate_logits(&logits, &labels);
        let trace: usize = (0..3).map(|k| ev.confusion[k][k]).sum();
        assert_abs_diff_eq!(ev.accuracy, trace as f64 / 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ev.accuracy, 0.8, epsilon = 1e-15);
        assert_eq!(ev.confusion.iter().map(|r| r.iter().sum::<usize>()).collect::<Vec<_>>(), vec![1, 2, 2]);
    }

    #[test]
    fn epoch_step_count() {
        assert_eq!(steps_per_epoch(12, 4), 3);
        assert_eq!(steps_per_epoch(13, 4), 4);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(m, 2.0);
        assert_abs_diff_eq!(s, 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
