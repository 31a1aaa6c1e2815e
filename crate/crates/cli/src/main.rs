//! Command-line front end: `test` runs the homogeneity test on a CSV file,
//! `sim` estimates rejection rates under the simulation models.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use glmm_homogeneity::covparam::GridSpec;
use glmm_homogeneity::data::load_dataset;
use glmm_homogeneity::expfam::FamilyKind;
use glmm_homogeneity::simharness::{CorrelationMode, Response, SimConfig, SimModel};
use glmm_homogeneity::{estimate_rates, run_test, Error, TestConfig};
use serde::Deserialize;

const EXIT_CONFIG: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "glmm-homog", version, about = "Score tests of homogeneity for generalized linear mixed models")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test a dataset for zero variance components.
    Test(TestArgs),
    /// Estimate size or power by Monte Carlo.
    Sim(SimArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum FamilyArg {
    Gaussian,
    Bernoulli,
    Binomial,
}

impl From<FamilyArg> for FamilyKind {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Gaussian => FamilyKind::Gaussian,
            FamilyArg::Bernoulli => FamilyKind::Bernoulli,
            FamilyArg::Binomial => FamilyKind::Binomial,
        }
    }
}

#[derive(Args, Debug, Default)]
struct TestArgs {
    /// CSV file with header cluster,y,x1..xp,z1..zq[,trials].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Default binomial index when the file has no trials column.
    #[arg(long)]
    trials: Option<u32>,
    /// JSON file with flat keys named like the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    r0: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// n1,n2,delta0
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct TestFile {
    data: Option<PathBuf>,
    family: Option<FamilyArg>,
    trials: Option<u32>,
    r0: Option<usize>,
    seed: Option<u64>,
    grid: Option<String>,
    alpha: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum ModelArg {
    Logistic,
    Linear,
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum ResponseArg {
    Bernoulli,
    Binomial,
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Considered,
    Ignored,
}

#[derive(Args, Debug, Default)]
struct SimArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    response: Option<ResponseArg>,
    #[arg(long)]
    trials: Option<u32>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long = "sigma1-sq", allow_hyphen_values = true)]
    sigma1_sq: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    rho1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    rho2: Option<f64>,
    #[arg(long = "sigma2-sq", allow_hyphen_values = true)]
    sigma2_sq: Option<f64>,
    /// Noise variance of the linear model.
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    r0: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// n1,n2,delta0
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct SimFile {
    model: Option<ModelArg>,
    response: Option<ResponseArg>,
    trials: Option<u32>,
    n: Option<usize>,
    m: Option<usize>,
    sigma1_sq: Option<f64>,
    rho1: Option<f64>,
    rho2: Option<f64>,
    sigma2_sq: Option<f64>,
    phi: Option<f64>,
    reps: Option<usize>,
    r0: Option<usize>,
    alpha: Option<f64>,
    seed: Option<u64>,
    grid: Option<String>,
    mode: Option<ModeArg>,
    out: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Error::Config(msg.into()).into()
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn parse_grid(s: Option<String>, default: GridSpec) -> Result<GridSpec, Failure> {
    match s {
        Some(s) => Ok(s.parse::<GridSpec>()?),
        None => Ok(default),
    }
}

/// Write `contents` to `path` via a temporary file in the same directory.
fn write_atomically(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn emit(out: Option<&Path>, contents: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => write_atomically(p, contents).map_err(|error| Failure { code: 2, error }),
        None => std::io::stdout()
            .write_all(contents)
            .map_err(|e| Failure { code: 2, error: e.into() }),
    }
}

/// A full-scale study (10⁴ replications, 10³ resamples, 620 grid points)
/// takes hours; anything within a factor of ten of that gets a warning.
fn is_heavy(points: usize, r0: usize, reps: usize) -> bool {
    (points as f64) * (r0 as f64) * (reps as f64) >= 6.2e8
}

fn cmd_test(args: TestArgs) -> Result<(), Failure> {
    let file: TestFile = read_config(args.config.as_deref())?;
    let data = args
        .data
        .or(file.data)
        .ok_or_else(|| config_error("--data is required"))?;
    let family = args
        .family
        .or(file.family)
        .ok_or_else(|| config_error("--family is required"))?;
    let seed = args
        .seed
        .or(file.seed)
        .ok_or_else(|| config_error("--seed is required"))?;
    let mut config = TestConfig::new(family.into(), seed);
    config.trials = args.trials.or(file.trials).unwrap_or(1);
    config.r0 = args.r0.or(file.r0).unwrap_or(config.r0);
    config.alpha = args.alpha.or(file.alpha).unwrap_or(config.alpha);
    config.grid = parse_grid(args.grid.or(file.grid), GridSpec::full())?;
    config.validate()?;
    let out = args.out.or(file.out);

    let dataset = load_dataset(&data)?;
    let report = run_test(&dataset, &config)?;
    let mut json = report.to_json();
    json.push('\n');
    emit(out.as_deref(), json.as_bytes())
}

fn cmd_sim(args: SimArgs) -> Result<(), Failure> {
    let f: SimFile = read_config(args.config.as_deref())?;
    let d = SimConfig::default();
    let seed = args
        .seed
        .or(f.seed)
        .ok_or_else(|| config_error("--seed is required"))?;
    let model = match args.model.or(f.model).unwrap_or(ModelArg::Logistic) {
        ModelArg::Logistic => SimModel::Logistic,
        ModelArg::Linear => SimModel::Linear,
    };
    let response = match args.response.or(f.response).unwrap_or(ResponseArg::Bernoulli) {
        ResponseArg::Bernoulli => Response::Bernoulli,
        ResponseArg::Binomial => Response::Binomial,
    };
    let mode = match args.mode.or(f.mode).unwrap_or(ModeArg::Considered) {
        ModeArg::Considered => CorrelationMode::Considered,
        ModeArg::Ignored => CorrelationMode::Ignored,
    };
    let config = SimConfig {
        model,
        response,
        trials: args.trials.or(f.trials).unwrap_or(d.trials),
        n: args.n.or(f.n).unwrap_or(d.n),
        m: args.m.or(f.m).unwrap_or(d.m),
        sigma1_sq: args.sigma1_sq.or(f.sigma1_sq).unwrap_or(d.sigma1_sq),
        rho1: args.rho1.or(f.rho1).unwrap_or(d.rho1),
        rho2: args.rho2.or(f.rho2).unwrap_or(d.rho2),
        sigma2_sq: args.sigma2_sq.or(f.sigma2_sq).unwrap_or(d.sigma2_sq),
        noise_var: args.phi.or(f.phi).unwrap_or(d.noise_var),
        reps: args.reps.or(f.reps).unwrap_or(d.reps),
        r0: args.r0.or(f.r0).unwrap_or(d.r0),
        alpha: args.alpha.or(f.alpha).unwrap_or(d.alpha),
        seed,
        grid: parse_grid(args.grid.or(f.grid), GridSpec::coarse())?,
        mode,
    };
    config.validate()?;
    let points = config.grid.n1 * config.grid.n2;
    if is_heavy(points, config.r0, config.reps) {
        eprintln!(
            "warning: {} replications x {} resamples on a {points}-point grid will take a long time",
            config.reps, config.r0
        );
    }
    let out = args.out.or(f.out);

    let table = estimate_rates(&config)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    emit(out.as_deref(), &buf)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| config_error(e.to_string()))?;
    }
    match cli.command {
        Command::Test(a) => cmd_test(a),
        Command::Sim(a) => cmd_sim(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
