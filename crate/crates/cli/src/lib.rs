//! Command-line front end: `fit`, `score`, `calibrate`, `evaluate` and `demo`.
//!
//! [`run`] parses arguments and executes one command, writing diagnostics to
//! the supplied streams and returning the process exit code: 0 on success,
//! 1 for usage errors, 2 for data errors and 3 for numeric failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use oodguard::pipeline::{fit_detector, run_demo, DemoConfig, FitOptions};
use oodguard::{
    evaluate, histogram_report, load_archive, FittedDetector, Method, Ridge, ScoreSeries,
};
use serde::Deserialize;

pub const THREADS_ENV: &str = "OODGUARD_THREADS";
pub const SCORE_HEADER: &str = "sample_index,canonical_score,confidence,is_ood";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Core(oodguard::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(e) => e.exit_code(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Core(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<oodguard::Error> for CliError {
    fn from(e: oodguard::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "oodguard",
    version,
    about = "Out-of-distribution detection for trained classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a detector on an activation archive and persist it with its calibration.
    Fit(FitArgs),
    /// Score an archive with a persisted detector and write a CSV.
    Score(ScoreArgs),
    /// Refit a persisted detector's calibration on in-distribution data.
    Calibrate(CalibrateArgs),
    /// Compare in-distribution and OOD score CSVs.
    Evaluate(EvaluateArgs),
    /// Run the synthetic three-detector comparison.
    Demo(DemoArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// JSON run config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// Training archive (manifest file or its directory).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Adversarial archive used to fit the Mahalanobis layer weights.
    #[arg(long)]
    adversarial: Option<PathBuf>,
    /// Output model directory.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ridge factor, scaled by the mean covariance eigenvalue.
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    orders: Option<Vec<u32>>,
    #[arg(long)]
    epsilon_div: Option<f64>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// In-distribution score CSV.
    #[arg(long = "in")]
    in_scores: Option<PathBuf>,
    /// OOD score CSV.
    #[arg(long = "ood")]
    ood_scores: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Label recorded in the report.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Option<Method>,
    pub ridge: Option<f64>,
    pub orders: Option<Vec<u32>>,
    pub epsilon_div: Option<f64>,
    pub temperature: Option<f64>,
    pub noise_grid: Option<Vec<f64>>,
    pub holdout_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub bins: Option<usize>,
    pub paths: Paths,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub adversarial: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub in_scores: Option<PathBuf>,
    pub ood_scores: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub histogram: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> CliResult<T> {
    flag.or(file)
        .ok_or_else(|| CliError::Usage(format!("missing --{name} (flag or config)")))
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

/// Caps the global rayon pool from `OODGUARD_THREADS`.
fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))
    })?;
    // the pool may already exist when run() is called repeatedly in one process
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Score(a) => cmd_score(a, out),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Demo(a) => cmd_demo(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

fn cmd_fit(a: FitArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let method = required(a.method, cfg.method, "method")?;
    let train_path = required(a.train, cfg.paths.train, "train")?;
    let model_dir = required(a.model, cfg.paths.model, "model")?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);

    let mut options = FitOptions::new(method);
    options.seed = seed;
    options.gram.seed = seed;
    if let Some(r) = a.ridge.or(cfg.ridge) {
        options.ridge = Ridge::TraceScaled(r);
    }
    if let Some(o) = a.orders.or(cfg.orders) {
        options.gram.orders = o;
    }
    if let Some(e) = a.epsilon_div.or(cfg.epsilon_div) {
        options.gram.epsilon_div = e;
    }
    if let Some(h) = a.holdout_fraction.or(cfg.holdout_fraction) {
        options.gram.holdout_fraction = h;
    }
    if let Some(t) = a.temperature.or(cfg.temperature) {
        options.temperature = t;
    }

    let train = load_archive(manifest_path(&train_path))?;
    let adversarial = match a.adversarial.or(cfg.paths.adversarial) {
        Some(p) => Some(load_archive(manifest_path(&p))?),
        None => None,
    };
    let fitted = fit_detector(&train, adversarial.as_ref(), &options)?;
    fitted.save(&model_dir)?;
    log::info!(
        "fitted {method} on {} samples into {}",
        train.len(),
        model_dir.display()
    );
    Ok(())
}

fn score_csv(model: &FittedDetector, archive: &oodguard::ActivationArchive) -> CliResult<String> {
    let mut csv = format!("{SCORE_HEADER}\n");
    if archive.is_empty() {
        return Ok(csv);
    }
    for (i, s) in model.score_samples(archive)?.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{}",
            s.canonical_score, s.confidence, s.is_ood
        );
    }
    Ok(csv)
}

fn cmd_score(a: ScoreArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let model_dir = required(a.model, cfg.paths.model, "model")?;
    let archive_path = required(a.archive, cfg.paths.archive, "archive")?;
    let model = FittedDetector::load(&model_dir)?;
    let archive = load_archive(manifest_path(&archive_path))?;
    let csv = score_csv(&model, &archive)?;
    match a.out.or(cfg.paths.out) {
        Some(p) => write_file(&p, csv.as_bytes()),
        None => out
            .write_all(csv.as_bytes())
            .map_err(|e| CliError::Data(format!("stdout: {e}"))),
    }
}

fn cmd_calibrate(a: CalibrateArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let model_dir = required(a.model, cfg.paths.model, "model")?;
    let archive_path = required(a.archive, cfg.paths.archive, "archive")?;
    let mut model = FittedDetector::load(&model_dir)?;
    let archive = load_archive(manifest_path(&archive_path))?;
    model.recalibrate(&archive)?;
    model.save(&model_dir)?;
    Ok(())
}

/// Reads the `canonical_score` column of a score CSV.
pub fn read_score_csv(path: &Path) -> CliResult<Vec<f64>> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Data(format!("{}: missing header", path.display())))?;
    let col = header
        .split(',')
        .position(|h| h.trim() == "canonical_score")
        .ok_or_else(|| CliError::Data(format!("{}: no canonical_score column", path.display())))?;
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(',')
                .nth(col)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| CliError::Data(format!("{}: bad row {}", path.display(), i + 2)))
        })
        .collect()
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let in_path = required(a.in_scores, cfg.paths.in_scores, "in")?;
    let ood_path = required(a.ood_scores, cfg.paths.ood_scores, "ood")?;
    let report_path = required(a.report, cfg.paths.report, "report")?;
    let trials = a.trials.or(cfg.trials).unwrap_or(1);
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let bins = a.bins.or(cfg.bins).unwrap_or(30);
    let tag = a.method.or(cfg.method).map_or("scores", Method::as_str);

    let in_scores = ScoreSeries::new(tag, read_score_csv(&in_path)?)?;
    let ood_scores = ScoreSeries::new(tag, read_score_csv(&ood_path)?)?;
    let report = evaluate(&in_scores, &ood_scores, trials, seed)?;
    write_json(&report_path, &report)?;
    if let Some(h) = a.histogram.or(cfg.paths.histogram) {
        let hist = histogram_report(in_scores.values(), ood_scores.values(), bins)?;
        write_file(&h, hist.to_csv().as_bytes())?;
    }
    Ok(())
}

fn cmd_demo(a: DemoArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let out_dir = required(a.out_dir, cfg.paths.out_dir, "out-dir")?;
    let mut demo = DemoConfig::default();
    if let Some(s) = a.seed.or(cfg.seed) {
        demo.seed = s;
    }
    if let Some(t) = a.trials.or(cfg.trials) {
        demo.trials = t;
    }
    if let Some(g) = cfg.noise_grid {
        demo.noise_grid = g;
    }
    if let Some(o) = cfg.orders {
        demo.gram_orders = o;
    }
    if let Some(b) = cfg.bins {
        demo.bins = b;
    }
    let outcome = run_demo(&demo)?;
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    write_json(&out_dir.join("table.json"), &outcome.table)?;
    for (method, dataset, hist) in outcome.histograms(demo.bins)? {
        write_file(
            &out_dir.join(format!("hist_{method}_{dataset}.csv")),
            hist.to_csv().as_bytes(),
        )?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
