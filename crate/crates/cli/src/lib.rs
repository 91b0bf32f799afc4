//! Command-line front end: every subcommand reads and writes files so runs
//! can be chained and repeated byte for byte.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use confts_core::metrics::{coverage_and_size, parse_rank_bins, truncation_diagnostic};
use confts_core::{
    generate, load_dataset, predict_sets, read_sets, run_pipeline_with, save_dataset,
    split_dataset, tune_map, CalibrationMap, ConformalThreshold, Error, EvaluateOptions, Format, LogitsDataset,
    MapKind, Precision, Result, ScoreKind, ScoreSpec, SplitSpec, SynthSpec, TuneConfig,
};

#[derive(Debug, Parser)]
#[command(name = "confts", version, about = "Split conformal prediction with efficiency-tuned calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic logits.
    Synth(SynthArgs),
    /// Partition a dataset into named parts.
    Split(SplitArgs),
    /// Tune a calibration map on a validation set.
    Tune(TuneArgs),
    /// Compute a conformal threshold on calibration data.
    Calibrate(CalibrateArgs),
    /// Build prediction sets for test data.
    Predict(PredictArgs),
    /// Score prediction sets against labels.
    Evaluate(EvaluateArgs),
    /// Sweep temperatures in f32 or f64 to expose softmax underflow.
    DemoPrecision(DemoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub signal: f64,
    #[arg(long)]
    pub noise: f64,
    #[arg(long)]
    pub overconfidence: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `name:frac[,name:frac...]`
    #[arg(long)]
    pub parts: String,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    pub shuffle: bool,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub map: MapKind,
    #[arg(long)]
    pub seed: u64,
    /// Tuned map JSON; the report goes to `<stem>.report.json` beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub score: ScoreKind,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    pub randomized: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub kreg: Option<usize>,
    /// Calibration map JSON; the identity map when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub threshold: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `default` or a list such as `1,2-3,4-10`.
    #[arg(long, default_value = "default")]
    pub bins: String,
    #[arg(long, default_value_t = confts_core::metrics::DEFAULT_ECE_BINS)]
    pub ece_bins: usize,
    /// Threshold file supplying the map, alpha and score for the report.
    #[arg(long)]
    pub threshold: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    /// Descending temperatures, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub t_grid: Vec<f64>,
    #[arg(long, default_value = "f64")]
    pub precision: Precision,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// One temperature of a precision sweep.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct DemoRow {
    pub t: f64,
    pub average_size: f64,
    pub coverage: f64,
    pub truncated_row_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct DemoReport {
    pub precision: Precision,
    pub alpha: f64,
    pub n_cal: usize,
    pub n_test: usize,
    pub rows: Vec<DemoRow>,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 for invalid input, 2 for I/O failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Tune(a) => tune(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::DemoPrecision(a) => demo_precision(a),
    }
}

fn load(path: &Path) -> Result<LogitsDataset> {
    load_dataset(path, Format::from_path(path))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(a: &SynthArgs) -> Result<()> {
    let ds = generate(&SynthSpec {
        n: a.n,
        num_classes: a.k,
        seed: a.seed,
        signal: a.signal,
        noise: a.noise,
        overconfidence: a.overconfidence,
    })?;
    save_dataset(&ds, &a.out, Format::from_path(&a.out))
}

/// Parses `name:frac,name:frac`.
pub fn parse_parts(text: &str) -> Result<Vec<(String, f64)>> {
    text.split(',')
        .map(|item| {
            let (name, frac) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("--parts entry `{item}` is not name:fraction")))?;
            let frac = frac
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("--parts fraction `{frac}` is not a number")))?;
            Ok((name.trim().to_string(), frac))
        })
        .collect()
}

fn split(a: &SplitArgs) -> Result<()> {
    let ds = load(&a.input)?;
    let spec = SplitSpec {
        seed: a.seed,
        parts: parse_parts(&a.parts)?,
        shuffle: a.shuffle,
    };
    let parts = split_dataset(&ds, &spec)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let format = Format::from_path(&a.input);
    for (name, part) in &parts {
        let path = a.out_dir.join(format!("{name}.{}", format.extension()));
        save_dataset(part, &path, format)?;
    }
    Ok(())
}

/// Where `tune` writes its report for a given map path.
pub fn report_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.report.json"))
}

fn tune(a: &TuneArgs) -> Result<()> {
    let ds = load(&a.input)?;
    let mut cfg = TuneConfig::default().with_seed(a.seed);
    if let Some(g) = a.grid_points {
        cfg.grid_points = g;
    }
    if let Some(t) = a.t_min {
        cfg.t_min = t;
    }
    if let Some(t) = a.t_max {
        cfg.t_max = t;
    }
    let tuned = tune_map(&ds, a.alpha, a.map, &cfg)?;
    tuned.map.save(&a.out)?;
    write_json(&tuned.report, &report_path(&a.out))
}

/// Score configuration from the calibrate flags.
pub fn score_spec(kind: ScoreKind, randomized: bool, lambda: Option<f64>, kreg: Option<usize>, seed: u64) -> Result<ScoreSpec> {
    let need_lambda = || lambda.ok_or_else(|| Error::Config(format!("--lambda is required for {kind:?} scores")));
    let spec = match kind {
        ScoreKind::Aps => ScoreSpec::aps(randomized),
        ScoreKind::Raps => ScoreSpec::raps(
            need_lambda()?,
            kreg.ok_or_else(|| Error::Config("--kreg is required for Raps scores".into()))?,
            randomized,
        ),
        ScoreKind::Saps => ScoreSpec::saps(need_lambda()?, randomized),
        ScoreKind::Lac => ScoreSpec::lac(),
    };
    if kind != ScoreKind::Raps && kreg.is_some() {
        return Err(Error::Config("--kreg only applies to raps".into()));
    }
    if !matches!(kind, ScoreKind::Raps | ScoreKind::Saps) && lambda.is_some() {
        return Err(Error::Config("--lambda only applies to raps and saps".into()));
    }
    let spec = spec.with_seed(seed);
    spec.validate()?;
    Ok(spec)
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let ds = load(&a.input)?;
    let spec = score_spec(a.score, a.randomized, a.lambda, a.kreg, a.seed)?;
    let map = match &a.params {
        Some(p) => CalibrationMap::load(p)?,
        None => CalibrationMap::identity(),
    };
    ConformalThreshold::calibrate(&ds, &map, &spec, a.alpha)?.save(&a.out)
}

fn predict(a: &PredictArgs) -> Result<()> {
    let ds = load(&a.input)?;
    let mut threshold = ConformalThreshold::load(&a.threshold)?;
    threshold.score.rng_seed = a.seed;
    let sets = predict_sets(&threshold, &ds)?;
    confts_core::write_sets(&sets, &a.out)
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ds = load(&a.input)?;
    let sets = read_sets(&a.sets)?;
    let mut opts = EvaluateOptions {
        ece_bins: a.ece_bins,
        ..Default::default()
    };
    if a.bins != "default" {
        opts.bins = Some(parse_rank_bins(&a.bins)?);
    }
    if let Some(path) = &a.threshold {
        let th = ConformalThreshold::load(path)?;
        opts.map = th.map;
        opts.alpha = Some(th.alpha);
        opts.score = Some(th.score);
    }
    let report = confts_core::evaluate(&sets, &ds, &opts)?;
    write_json(&report, &a.out)
}

/// Runs the randomized APS pipeline at each temperature on a seeded 50/50
/// split of `ds`.
pub fn precision_sweep(ds: &LogitsDataset, alpha: f64, t_grid: &[f64], precision: Precision, seed: u64) -> Result<DemoReport> {
    if t_grid.is_empty() {
        return Err(Error::Config("--t-grid is empty".into()));
    }
    if t_grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config("--t-grid must be strictly descending".into()));
    }
    let mut parts = split_dataset(ds, &SplitSpec::halves("cal", "test", seed))?;
    let (cal, test) = (parts.remove("cal").unwrap(), parts.remove("test").unwrap());
    let spec = ScoreSpec::aps(true).with_seed(seed);
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let map = CalibrationMap::temperature(t)?;
        let out = run_pipeline_with(&cal, &test, &map, &spec, alpha, precision)?;
        let (coverage, average_size) = coverage_and_size(&out.sets, test.labels())?;
        let trunc = truncation_diagnostic(&map, &test, precision)?;
        rows.push(DemoRow {
            t,
            average_size,
            coverage,
            truncated_row_fraction: trunc.truncated_row_fraction,
        });
    }
    Ok(DemoReport {
        precision,
        alpha,
        n_cal: cal.len(),
        n_test: test.len(),
        rows,
    })
}

fn demo_precision(a: &DemoArgs) -> Result<()> {
    let ds = load(&a.input)?;
    let report = precision_sweep(&ds, a.alpha, &a.t_grid, a.precision, a.seed)?;
    write_json(&report, &a.out)
}
