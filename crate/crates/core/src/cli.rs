//! Command-line driver. Every subcommand writes its outputs under `--out`
//! together with `run_config.json` (the fully resolved configuration, which
//! `--config` accepts back) and `manifest.json`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::importance::{
    compare_csv, compare_forms, frequency_importance, frequency_range_sweep, sweep_csv, temporal_importance, CurveAxis,
    DEFAULT_WINDOW,
};
use crate::mst::{MstParams, SPECTROGRAM_MAGIC};
use crate::network::{load_checkpoint, save_checkpoint, ArchConfig, FilterAxis, ModelParams};
use crate::signal::{load_dataset, save_dataset, DATASET_MAGIC};
use crate::spectral::{InputForm, Mask, SpectralDataset};
use crate::syndata::{generate, SynthConfig};
use crate::trainer::{cross_validate, evaluate, kfold_split, train_model, TrainConfig};

pub const THREADS_ENV: &str = "MSTDECODE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mstdecode", version, about = "Modified S-transform features and dual-encoder decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with planted structure.
    Generate(Flags),
    /// Normalize and transform a dataset into a spectrogram cache.
    Transform(Flags),
    /// Cross-validate a model and save one checkpoint per fold.
    Train(Flags),
    /// Evaluate a checkpoint on a dataset.
    Eval(Flags),
    /// Occlusion importance over time or frequency.
    Importance(Flags),
    /// Cross-validate single-encoder models over shrinking frequency bands.
    Sweep(Flags),
    /// Cross-validate every input form on the same split.
    Compare(Flags),
    /// Describe a dataset or spectrogram cache.
    Info(InfoArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Flags {
    /// Dataset file, spectrogram cache, or a directory holding dataset.bin.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    f_lo: Option<f64>,
    #[arg(long)]
    f_hi: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Input form, e.g. real_imag_parallel or amp_only.
    #[arg(long)]
    mode: Option<String>,
    /// Importance axis: time or frequency.
    #[arg(long)]
    axis: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Stage-2 filter axis: spatial, frequency or temporal.
    #[arg(long)]
    filter_axis: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Fold whose split trains the importance model.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    trials_per_class: Option<usize>,
    #[arg(long)]
    n_channels: Option<usize>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    onset_ms: Option<f64>,
    #[arg(long)]
    response_ms: Option<f64>,
    /// Comma-separated carrier list in Hz, one per class.
    #[arg(long)]
    carriers: Option<String>,
    #[arg(long)]
    phase_coded: bool,
    /// Comma-separated upper band edges for `sweep`.
    #[arg(long)]
    ranges: Option<String>,
    /// Comma-separated input forms for `compare`.
    #[arg(long)]
    modes: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct InfoArgs {
    path: PathBuf,
    #[command(flatten)]
    flags: Flags,
}

/// Fully resolved configuration of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mst: MstParams,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub mode: InputForm,
    pub axis: CurveAxis,
    pub window: usize,
    pub stride: usize,
    pub fold: usize,
    pub sweep_mode: InputForm,
    pub ranges_hz: Vec<f64>,
    pub modes: Vec<InputForm>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mst = MstParams::default();
        Self {
            f_hi_hz: f64::from(mst.f_max_hz),
            mst,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
            f_lo_hz: 0.0,
            mode: InputForm::RealImagParallel,
            axis: CurveAxis::Time,
            window: DEFAULT_WINDOW,
            stride: 1,
            fold: 0,
            sweep_mode: InputForm::RealOnly,
            ranges_hz: vec![128.0, 100.0, 80.0, 64.0, 52.0, 38.0, 25.0],
            modes: InputForm::ALL.to_vec(),
        }
    }
}

/// Error with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) | Error::UnsupportedAxis(_) | Error::EmptyRange { .. } | Error::TooFewTrials { .. } => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_list<T>(key: &str, raw: &str, f: impl Fn(&str) -> Option<T>) -> CliResult<Vec<T>> {
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| Failure::config(format!("--{key}: cannot parse {s:?}"))))
        .collect()
}

fn resolve(flags: &Flags) -> CliResult<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("--config {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| Failure::config(format!("--config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    if let Some(v) = flags.f_lo {
        cfg.f_lo_hz = v;
    }
    if let Some(v) = flags.f_hi {
        cfg.f_hi_hz = v;
    }
    if let Some(v) = flags.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = flags.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = flags.folds {
        cfg.train.folds = v;
    }
    if let Some(v) = &flags.mode {
        let form = v.parse::<InputForm>().map_err(|e| Failure::config(format!("--mode: {e}")))?;
        cfg.mode = form;
        if form.n_encoders() == 1 {
            cfg.sweep_mode = form;
        }
    }
    if let Some(v) = &flags.axis {
        cfg.axis = match v.as_str() {
            "time" => CurveAxis::Time,
            "frequency" => CurveAxis::Frequency,
            other => return Err(Failure::config(format!("--axis: expected time or frequency, got {other:?}"))),
        };
    }
    if let Some(v) = flags.stride {
        cfg.stride = v;
    }
    if let Some(v) = flags.window {
        cfg.window = v;
    }
    if let Some(v) = flags.fold {
        cfg.fold = v;
    }
    if let Some(v) = &flags.filter_axis {
        cfg.arch.filter_axis = v.parse::<FilterAxis>().map_err(|e| Failure::config(format!("--filter-axis: {e}")))?;
    }
    if let Some(v) = flags.trials_per_class {
        cfg.synth.trials_per_class = v;
    }
    if let Some(v) = flags.n_channels {
        cfg.synth.n_channels = v;
    }
    if let Some(v) = flags.snr_db {
        cfg.synth.snr_db = v;
    }
    if let Some(v) = flags.onset_ms {
        cfg.synth.onset_ms = v;
    }
    if let Some(v) = flags.response_ms {
        cfg.synth.response_ms = Some(v);
    }
    if let Some(v) = &flags.carriers {
        cfg.synth.carrier_hz = parse_list("carriers", v, |s| s.parse().ok())?;
        cfg.synth.n_classes = cfg.synth.carrier_hz.len();
    }
    if flags.phase_coded {
        cfg.synth.phase_coded = true;
    }
    if let Some(v) = &flags.ranges {
        cfg.ranges_hz = parse_list("ranges", v, |s| s.parse().ok())?;
    }
    if let Some(v) = &flags.modes {
        cfg.modes = parse_list("modes", v, |s| s.parse().ok())?;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    seed: u64,
    config: &'a RunConfig,
    versions: Versions,
    wall_seconds: f64,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Versions {
    mstdecode: &'static str,
    dataset_format: u32,
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, body: &str) -> CliResult<()> {
        let p = self.path(name);
        fs::write(p, body)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> CliResult<()> {
        let body = serde_json::to_string_pretty(v)?;
        self.text(name, &(body + "\n"))
    }
}

enum Source {
    Raw(PathBuf),
    Cache(PathBuf),
}

fn locate(path: &Path) -> CliResult<Source> {
    let file = if path.is_dir() { path.join("dataset.bin") } else { path.to_path_buf() };
    let mut magic = [0u8; 8];
    fs::File::open(&file)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| Failure { code: 1, message: format!("{}: {e}", file.display()) })?;
    if &magic == DATASET_MAGIC {
        Ok(Source::Raw(file))
    } else if &magic == SPECTROGRAM_MAGIC {
        Ok(Source::Cache(file))
    } else {
        Err(Error::Format(format!("{}: neither a dataset nor a spectrogram cache", file.display())).into())
    }
}

fn dataset_flag(flags: &Flags) -> CliResult<&Path> {
    flags.dataset.as_deref().ok_or_else(|| Failure::config("--dataset is required"))
}

/// Spectrograms on `[f_lo, f_hi]`, transforming a raw dataset when needed.
fn spectral(flags: &Flags, cfg: &RunConfig) -> CliResult<SpectralDataset> {
    match locate(dataset_flag(flags)?)? {
        Source::Raw(p) => Ok(SpectralDataset::from_dataset(&load_dataset(&p)?, &cfg.mst, cfg.f_lo_hz, cfg.f_hi_hz)?),
        Source::Cache(p) => Ok(SpectralDataset::load(&p)?.crop(cfg.f_lo_hz, cfg.f_hi_hz)?),
    }
}

fn fmt_info(path: &Path) -> CliResult<String> {
    Ok(match locate(path)? {
        Source::Raw(p) => {
            let ds = load_dataset(&p)?;
            let (c, t, tb) = ds.dims();
            format!(
                "dataset: {}\ntrials: {}\nclasses: {}\nchannels x time: {c}x{t}\nbackground samples: {tb}\nsample rate: {} Hz\nclass counts: {:?}\nseed: {}\n",
                p.display(),
                ds.len(),
                ds.n_classes,
                ds.sample_rate_hz(),
                ds.class_counts(),
                ds.seed
            )
        }
        Source::Cache(p) => {
            let sd = SpectralDataset::load(&p)?;
            format!(
                "spectrogram cache: {}\ntrials: {}\nclasses: {}\nfrequencies x channels x time: {}x{}x{}\nband: {}..{} Hz\n",
                p.display(),
                sd.len(),
                sd.n_classes,
                sd.n_freq,
                sd.n_channels,
                sd.n_time,
                sd.freq_grid_hz.first().copied().unwrap_or(0.0),
                sd.freq_grid_hz.last().copied().unwrap_or(0.0)
            )
        }
    })
}

fn run_command(name: &str, flags: &Flags, cfg: &RunConfig, info_path: Option<&Path>, out: &mut Outputs) -> CliResult<()> {
    match name {
        "generate" => {
            let ds = generate(&cfg.synth)?;
            let p = out.path("dataset.bin");
            save_dataset(&ds, &p)?;
            out.written.push("dataset.bin.meta.json".into());
            println!("wrote {} trials to {}", ds.len(), p.display());
        }
        "transform" => {
            let sd = spectral(flags, cfg)?;
            let p = out.path("spectrogram.bin");
            sd.save(&p)?;
            out.written.push("spectrogram.bin.meta.json".into());
            println!("wrote {} spectrograms ({} bins) to {}", sd.len(), sd.n_freq, p.display());
        }
        "train" => {
            cfg.train.validate()?;
            let sd = spectral(flags, cfg)?;
            let outcome = cross_validate(&sd, cfg.mode, &cfg.arch, &cfg.train)?;
            for (i, m) in outcome.models.iter().enumerate() {
                save_checkpoint(m, &out.path(&format!("fold{i}.ckpt")))?;
            }
            out.text("folds.csv", &outcome.report.to_csv())?;
            out.json("report.json", &outcome.report)?;
            out.json("splits.json", &outcome.splits)?;
            println!(
                "{} {}-fold accuracy {:.4} ± {:.4}",
                cfg.mode, cfg.train.folds, outcome.report.mean_accuracy, outcome.report.std_accuracy
            );
        }
        "eval" => {
            let ckpt = flags.checkpoint.as_deref().ok_or_else(|| Failure::config("--checkpoint is required"))?;
            let model = load_checkpoint(ckpt)?;
            let sd = spectral(flags, cfg)?;
            let form = form_for(&model, cfg.mode)?;
            let idx: Vec<usize> = (0..sd.len()).collect();
            let ev = evaluate(&model, &sd, &idx, form, Mask::None)?;
            out.json("eval.json", &ev)?;
            println!("accuracy {:.4} on {} trials", ev.accuracy, sd.len());
        }
        "importance" => {
            let sd = spectral(flags, cfg)?;
            let (model, idx, form) = importance_model(flags, cfg, &sd, out)?;
            let curve = match cfg.axis {
                CurveAxis::Time => temporal_importance(&model, &sd, &idx, form, cfg.window, cfg.stride)?,
                CurveAxis::Frequency => frequency_importance(&model, &sd, &idx, form)?,
            };
            let tag = match cfg.axis {
                CurveAxis::Time => "time",
                CurveAxis::Frequency => "frequency",
            };
            out.text(&format!("importance_{tag}.csv"), &curve.to_csv())?;
            out.text(&format!("importance_{tag}.svg"), &curve.to_svg())?;
            out.json(&format!("importance_{tag}.json"), &curve)?;
            println!(
                "{} positions, baseline {:.4}, first above chance+{}: {:?}",
                curve.index.len(),
                curve.baseline_accuracy,
                curve.threshold,
                curve.first_above_threshold().map(|i| curve.index[i])
            );
        }
        "sweep" => {
            cfg.train.validate()?;
            let sd = spectral(flags, cfg)?;
            let (rows, reports) = frequency_range_sweep(&sd, cfg.f_lo_hz, &cfg.ranges_hz, cfg.sweep_mode, &cfg.arch, &cfg.train)?;
            out.text("sweep.csv", &sweep_csv(&rows))?;
            out.json("sweep.json", &(rows, reports))?;
        }
        "compare" => {
            cfg.train.validate()?;
            let sd = spectral(flags, cfg)?;
            let reports = compare_forms(&sd, &cfg.modes, &cfg.arch, &cfg.train)?;
            out.text("compare.csv", &compare_csv(&reports))?;
            out.json("compare.json", &reports)?;
            for r in &reports {
                println!("{:<20} {:.4} ± {:.4}", r.form.to_string(), r.mean_accuracy, r.std_accuracy);
            }
        }
        "info" => {
            let text = fmt_info(info_path.expect("info has a path"))?;
            print!("{text}");
            out.text("info.txt", &text)?;
        }
        other => unreachable!("unknown command {other}"),
    }
    Ok(())
}

/// The configured form when it fits the checkpoint, else the form implied by
/// its encoder count.
fn form_for(model: &ModelParams, wanted: InputForm) -> CliResult<InputForm> {
    match (model.config.n_encoders, wanted.n_encoders()) {
        (a, b) if a == b => Ok(wanted),
        (2, _) => Ok(InputForm::RealImagParallel),
        (1, _) => Ok(InputForm::RealOnly),
        (n, _) => Err(Failure::config(format!("checkpoint has {n} encoders"))),
    }
}

/// Model for occlusion: a given checkpoint evaluated on every trial, or a
/// fresh model trained on one fold's training split and evaluated on its
/// held-out trials.
fn importance_model(flags: &Flags, cfg: &RunConfig, sd: &SpectralDataset, out: &mut Outputs) -> CliResult<(ModelParams, Vec<usize>, InputForm)> {
    if let Some(ckpt) = &flags.checkpoint {
        let model = load_checkpoint(ckpt)?;
        let form = form_for(&model, cfg.mode)?;
        return Ok((model, (0..sd.len()).collect(), form));
    }
    cfg.train.validate()?;
    let splits = kfold_split(&sd.labels, sd.n_classes, cfg.train.folds, cfg.train.seed)?;
    let (train, val) = splits
        .get(cfg.fold)
        .ok_or_else(|| Failure::config(format!("fold {} out of range for {} folds", cfg.fold, cfg.train.folds)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(cfg.fold as u64 + 1);
    let (model, _) = train_model(sd, train, cfg.mode, &cfg.arch, &cfg.train, &mut rng)?;
    save_checkpoint(&model, &out.path("importance_model.ckpt"))?;
    Ok((model, val.clone(), cfg.mode))
}

fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        // a pool built earlier in this process wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs one invocation; `argv[0]` is the program name. Returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    let (name, flags, info_path) = match &cli.command {
        Command::Generate(f) => ("generate", f, None),
        Command::Transform(f) => ("transform", f, None),
        Command::Train(f) => ("train", f, None),
        Command::Eval(f) => ("eval", f, None),
        Command::Importance(f) => ("importance", f, None),
        Command::Sweep(f) => ("sweep", f, None),
        Command::Compare(f) => ("compare", f, None),
        Command::Info(a) => ("info", &a.flags, Some(a.path.as_path())),
    };
    match execute(name, flags, info_path, &argv) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn execute(name: &str, flags: &Flags, info_path: Option<&Path>, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let cfg = resolve(flags)?;
    let mut out = Outputs::new(&flags.out)?;
    out.json("run_config.json", &cfg)?;
    let result = run_command(name, flags, &cfg, info_path, &mut out);
    let manifest = Manifest {
        command: name,
        argv,
        seed: cfg.train.seed,
        config: &cfg,
        versions: Versions {
            mstdecode: env!("CARGO_PKG_VERSION"),
            dataset_format: crate::signal::DATASET_VERSION,
        },
        wall_seconds: start.elapsed().as_secs_f64(),
        outputs: out.written.clone(),
    };
    fs::write(out.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!(cfg.train.lr, 1e-6);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.f_hi_hz, 128.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
        let flags = Flags { config: Some(path), ..Flags::default() };
        let err = resolve(&flags).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("learning_rate"), "{}", err.message);
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"lr": 0.1, "epochs": 3}, "stride": 5}"#).unwrap();
        let flags = Flags { config: Some(path), lr: Some(0.5), ..Flags::default() };
        let cfg = resolve(&flags).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.stride, 5);
    }

    #[test]
    fn bad_flag_values_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let out = out.to_str().unwrap();
        assert_eq!(run(["mstdecode", "generate", "--out", out, "--carriers", "8,x"]), 2);
        assert_eq!(run(["mstdecode", "train", "--out", out, "--mode", "phase"]), 2);
        assert_eq!(run(["mstdecode", "train", "--out", out, "--no-such-flag"]), 2);
        assert_eq!(run(["mstdecode", "generate", "--out", out, "--trials-per-class", "0"]), 2);
        assert!(Path::new(out).join("manifest.json").exists());
    }
}
