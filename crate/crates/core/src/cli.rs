//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::bounds::BetaSpec;
use crate::dataset::{load_panel, wide_to_long, PanelConfig, PanelDataset};
use crate::par::with_threads;
use crate::port::PortConfig;
use crate::report::{
    render_csv, render_json, render_markdown, render_trajectories_csv, render_trajectories_markdown,
    trajectory_summary,
};
use crate::rules::InterventionRule;
use crate::simgen::{generate, SimConfig};
use crate::sport::{run_sport, CheckSpec, History, RuleLevel, Smoothing};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sport", version, about = "Detect sequential positivity violations with regression trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check positivity of treatment under an intervention rule.
    Check(CheckArgs),
    /// Check positivity of remaining uncensored.
    CheckCensoring(CheckArgs),
    /// Count observed treatment histories per time.
    Trajectories(TrajectoryArgs),
    /// Generate a synthetic cohort.
    Simulate(SimulateArgs),
    /// Validate a panel without running any check.
    Validate(DataArgs),
    /// Convert a wide table with `<stem>_<t>` columns to long format.
    Reshape(ReshapeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Md,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryArg {
    Smooth,
    Stratify,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub time: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    #[arg(long)]
    pub censoring: Option<String>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub baseline: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub timevarying: Vec<String>,
    /// Covariates read as categorical even when their values look numeric.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Drop rows with missing covariates and the subject's later rows.
    #[arg(long)]
    pub drop_incomplete: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `static:<0|1>` or `dynamic: <expression>`.
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub monotone: bool,
    #[arg(long)]
    pub pooled: bool,
    #[arg(long, value_enum)]
    pub history: Option<HistoryArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `gruber` or a number in (0, 0.5).
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for pipeline symmetry; checks are deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReshapeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub id: String,
    /// Stems of the time-indexed columns.
    #[arg(long, value_delimiter = ',', required = true)]
    pub stems: Vec<String>,
    #[arg(long, default_value = "time")]
    pub time_name: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Keys of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data: Option<PathBuf>,
    id: Option<String>,
    time: Option<String>,
    treatment: Option<String>,
    censoring: Option<String>,
    outcome: Option<String>,
    baseline: Option<Vec<String>>,
    timevarying: Option<Vec<String>>,
    categorical: Option<Vec<String>>,
    drop_incomplete: Option<bool>,
    rule: Option<String>,
    monotone: Option<bool>,
    pooled: Option<bool>,
    history: Option<HistoryArg>,
    alpha: Option<f64>,
    beta: Option<String>,
    gamma: Option<usize>,
    format: Option<Format>,
    out: Option<PathBuf>,
    seed: Option<u64>,
}

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::User(m) | CliError::Internal(m) => m,
        }
    }
}

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn read_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| user(format!("--config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| user(format!("--config {}: {e}", path.display())))
}

fn or_file<T>(flag: Option<T>, file: &mut Option<T>) -> Option<T> {
    flag.or_else(|| file.take())
}

fn or_file_list(flag: Vec<String>, file: &mut Option<Vec<String>>) -> Vec<String> {
    if flag.is_empty() {
        file.take().unwrap_or_default()
    } else {
        flag
    }
}

fn load(args: DataArgs, file: &mut FileConfig) -> Result<PanelDataset, CliError> {
    let required = |v: Option<String>, flag: &str| v.ok_or_else(|| user(format!("missing required flag --{flag}")));
    let data = or_file(args.data, &mut file.data).ok_or_else(|| user("missing required flag --data"))?;
    let cfg = PanelConfig {
        id: required(or_file(args.id, &mut file.id), "id")?,
        time: required(or_file(args.time, &mut file.time), "time")?,
        treatment: required(or_file(args.treatment, &mut file.treatment), "treatment")?,
        censoring: or_file(args.censoring, &mut file.censoring),
        outcome: or_file(args.outcome, &mut file.outcome),
        baseline: or_file_list(args.baseline, &mut file.baseline),
        time_varying: or_file_list(args.timevarying, &mut file.timevarying),
        categorical: or_file_list(args.categorical, &mut file.categorical),
        drop_incomplete: args.drop_incomplete || file.drop_incomplete.unwrap_or(false),
    };
    load_panel(&data, &cfg).map_err(|e| user(format!("--data {}: {e}", data.display())))
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| user(format!("--out {}: {e}", path.display()))),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(format!("cannot write output: {e}"))),
    }
}

fn run_check(args: CheckArgs, censoring: bool, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut file = read_file_config(args.data.config.as_deref())?;
    let ds = load(args.data, &mut file)?;
    let alpha = or_file(args.alpha, &mut file.alpha).unwrap_or(0.05);
    let beta: BetaSpec = match or_file(args.beta, &mut file.beta) {
        Some(b) => b.parse().map_err(|e| user(format!("--beta: {e}")))?,
        None => BetaSpec::Gruber,
    };
    let gamma = or_file(args.gamma, &mut file.gamma).unwrap_or(2);
    let config = PortConfig { alpha, beta, gamma, ..PortConfig::default() };
    config.validate().map_err(user)?;
    if let Some(seed) = or_file(args.seed, &mut file.seed) {
        log::debug!("seed {seed} ignored: checks are deterministic");
    }
    let format = or_file(args.format, &mut file.format).unwrap_or(Format::Md);
    let out = or_file(args.out, &mut file.out);
    let smoothing = if args.pooled || file.pooled.unwrap_or(false) {
        Smoothing::PooledOverTime
    } else {
        Smoothing::StratifiedByTime
    };
    let history = match or_file(args.history, &mut file.history) {
        Some(HistoryArg::Stratify) => History::StratifyOnHistory,
        _ => History::SmoothOverHistory,
    };
    let adjustment: Vec<String> = ds.schema().iter().map(|c| c.name.clone()).collect();

    let checks: Vec<CheckSpec> = if censoring {
        vec![CheckSpec::censoring(adjustment).smoothing(smoothing)]
    } else {
        let text = or_file(args.rule, &mut file.rule).ok_or_else(|| user("missing required flag --rule"))?;
        let rule = InterventionRule::parse(&text, ds.schema()).map_err(|e| user(format!("--rule: {e}")))?;
        let monotone = args.monotone || file.monotone.unwrap_or(false);
        let levels = match rule {
            InterventionRule::Static { value: 1 } => vec![RuleLevel::FollowRuleTreat],
            InterventionRule::Static { .. } => vec![RuleLevel::FollowRuleUntreat],
            InterventionRule::Dynamic { .. } => vec![RuleLevel::FollowRuleTreat, RuleLevel::FollowRuleUntreat],
        };
        levels
            .into_iter()
            .map(|level| {
                CheckSpec::treatment(rule.clone(), level, adjustment.clone())
                    .monotone(monotone)
                    .smoothing(smoothing)
                    .history(history)
            })
            .collect()
    };
    if !censoring && !ds.monotonicity_issues().is_empty() && checks.iter().any(|c| c.monotone) {
        log::warn!("--monotone given but some subjects discontinue treatment");
    }

    let reports = checks
        .iter()
        .map(|c| run_sport(&ds, c, &config).map_err(user))
        .collect::<Result<Vec<_>, _>>()?;
    for w in reports.iter().flat_map(|r| r.per_time.iter().flat_map(|t| t.warnings.iter())) {
        log::warn!("{w}");
    }
    let text = match format {
        Format::Md => render_markdown(&reports),
        Format::Csv => render_csv(&reports),
        Format::Json => render_json(&reports),
    };
    emit(out.as_deref(), &text, stdout)
}

fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Check(args) => run_check(args, false, stdout),
        Command::CheckCensoring(args) => run_check(args, true, stdout),
        Command::Trajectories(args) => {
            let mut file = read_file_config(args.data.config.as_deref())?;
            let ds = load(args.data, &mut file)?;
            let summary = trajectory_summary(&ds);
            let text = match or_file(args.format, &mut file.format).unwrap_or(Format::Md) {
                Format::Md => render_trajectories_markdown(&summary),
                Format::Csv => render_trajectories_csv(&summary),
                Format::Json => {
                    serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))? + "\n"
                }
            };
            emit(or_file(args.out, &mut file.out).as_deref(), &text, stdout)
        }
        Command::Simulate(args) => {
            let text = std::fs::read_to_string(&args.config)
                .map_err(|e| user(format!("--config {}: {e}", args.config.display())))?;
            let mut cfg = SimConfig::from_toml(&text).map_err(|e| user(format!("--config: {e}")))?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let ds = generate(&cfg).map_err(user)?;
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
            emit(args.out.as_deref(), &String::from_utf8_lossy(&buf), stdout)
        }
        Command::Validate(args) => {
            let mut file = read_file_config(args.config.as_deref())?;
            let ds = load(args, &mut file)?;
            let times = ds.time_points();
            let mut text = format!(
                "ok: {} subjects, {} records, times {}..{}\n",
                ds.subjects().len(),
                ds.len(),
                times.first().copied().unwrap_or(0),
                times.last().copied().unwrap_or(0)
            );
            for issue in ds.monotonicity_issues() {
                text.push_str(&format!("note: {issue}\n"));
            }
            emit(None, &text, stdout)
        }
        Command::Reshape(args) => {
            let text = std::fs::read_to_string(&args.data)
                .map_err(|e| user(format!("--data {}: {e}", args.data.display())))?;
            let long = wide_to_long(&text, &args.id, &args.stems, &args.time_name).map_err(user)?;
            emit(args.out.as_deref(), &long, stdout)
        }
    }
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("SPORT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| user(format!("SPORT_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

/// Parses `args`, runs the command and returns the exit code. Errors go to `stderr`.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let _ = write!(stderr, "{e}");
            return code;
        }
    };
    let result = threads_from_env().and_then(|threads| {
        let mut buf = Vec::new();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| with_threads(threads, || run(cli, &mut buf))))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "unknown panic".into());
                Err(CliError::Internal(format!("internal error: {msg}")))
            });
        r.and_then(|()| stdout.write_all(&buf).map_err(|e| CliError::Internal(e.to_string())))
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.code()
        }
    }
}
