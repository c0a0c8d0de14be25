//! `semms` command-line tool. Column numbers on the command line and in
//! config files are 1-based.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use semms::gam::SemmsFit;
use semms::glmm::ResponseKind;
use semms::lasso::LassoConfig;
use semms::mixed::{fit_semms_mixed, FinalModel, MixedConfig};
use semms::mixture::{MixtureState, ModelParams};
use semms::sim::{self, BenchMethod, BenchSettings, SimScenario};
use semms::{fit_semms, fit_semms_glm, load_dataset, Dataset, Family, LoadSpec};

use settings::{one_based, parse_columns, parse_re, Settings};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] semms::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "semms",
    version,
    about = "Fixed-effect selection with a ternary mixture prior, optionally adjusted for clustered random effects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plain selection (Gaussian, or IRLS for Poisson/binomial).
    Fit(FitArgs),
    /// Selection alternating with a random-effects refit.
    FitMixed(FitMixedArgs),
    /// Write one simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Replicate a scenario and compare methods.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML settings file, or a JSON run report to rerun.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Response column (1-based).
    #[arg(long)]
    ycol: Option<usize>,
    /// Candidate columns, e.g. `4-103` or `4,7,9-12` (1-based).
    #[arg(long)]
    zcols: Option<String>,
    #[arg(long)]
    family: Option<Family>,
    /// Grouping column (1-based).
    #[arg(long)]
    group_col: Option<usize>,
    /// Random-slope covariate column (1-based).
    #[arg(long)]
    slope_col: Option<usize>,
    /// Center and scale the slope covariate after loading.
    #[arg(long)]
    standardize_slope: bool,
}

#[derive(Args)]
struct SelectArgs {
    /// Size of the screened starting set.
    #[arg(long)]
    nn: Option<usize>,
    #[arg(long)]
    mincor: Option<f64>,
    /// Minimum objective gain for a label change.
    #[arg(long)]
    minchange: Option<f64>,
    #[arg(long)]
    max_gam_iters: Option<usize>,
    #[arg(long)]
    em_tol: Option<f64>,
    #[arg(long)]
    em_max_iters: Option<usize>,
}

#[derive(Args)]
struct MixedArgs {
    /// Random effects: `intercept`, `slope` or `intercept,slope`.
    #[arg(long)]
    re: Option<String>,
    /// Outer-loop tolerance on the largest change in predicted random effects.
    #[arg(long)]
    conv_tol: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
    /// Start the outer loop from zero random effects.
    #[arg(long)]
    no_warm_start: bool,
    /// Adjusted response for non-Gaussian families: `working` or `link-scale`.
    #[arg(long, value_parser = parse_response)]
    response: Option<ResponseKind>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    select: SelectArgs,
}

#[derive(Args)]
struct FitMixedArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    select: SelectArgs,
    #[command(flatten)]
    mixed: MixedArgs,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Built-in scenario name (sim1 ... sim6).
    #[arg(long)]
    scenario: Option<String>,
    /// TOML scenario file (`base = "simN"` plus overrides).
    #[arg(long)]
    scenario_file: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Destination CSV.
    #[arg(long)]
    data_out: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    reps: Option<usize>,
    /// Replicate r uses seed base_seed + r.
    #[arg(long)]
    base_seed: Option<u64>,
    /// Comma-separated: plain, mixed, lasso.
    #[arg(long)]
    methods: Option<String>,
    /// Worker threads for replicates.
    #[arg(long, env = "SEMMS_WORKERS")]
    workers: Option<usize>,
    /// Aggregate table as JSON (deterministic: no timings).
    #[arg(long)]
    table_out: Option<PathBuf>,
    /// Per-replicate rows as CSV.
    #[arg(long)]
    rows_out: Option<PathBuf>,
    #[command(flatten)]
    select: SelectArgs,
    #[command(flatten)]
    mixed: MixedArgs,
    #[arg(long)]
    nfolds: Option<usize>,
    #[arg(long)]
    n_lambda: Option<usize>,
    #[arg(long)]
    lambda_min_ratio: Option<f64>,
}

fn parse_response(s: &str) -> Result<ResponseKind, String> {
    match s {
        "working" => Ok(ResponseKind::Working),
        "link-scale" => Ok(ResponseKind::LinkScale),
        other => Err(format!(
            "unknown response kind {other:?}; use working or link-scale"
        )),
    }
}

impl DataArgs {
    fn apply(&self, s: &mut Settings) {
        s.input = self.input.clone();
        s.ycol = self.ycol;
        s.zcols = self.zcols.clone();
        s.family = self.family;
        s.group_col = self.group_col;
        s.slope_col = self.slope_col;
        s.standardize_slope = self.standardize_slope.then_some(true);
    }
}

impl SelectArgs {
    fn apply(&self, s: &mut Settings) {
        s.nn = self.nn;
        s.mincor = self.mincor;
        s.minchange = self.minchange;
        s.max_gam_iters = self.max_gam_iters;
        s.em_tol = self.em_tol;
        s.em_max_iters = self.em_max_iters;
    }
}

impl MixedArgs {
    fn apply(&self, s: &mut Settings) {
        s.re = self.re.clone();
        s.conv_tol = self.conv_tol;
        s.max_outer = self.max_outer;
        s.warm_start = self.no_warm_start.then_some(false);
        s.response = self.response;
    }
}

impl ScenarioArgs {
    fn apply(&self, s: &mut Settings) {
        s.scenario = self.scenario.clone();
        s.scenario_file = self.scenario_file.clone();
    }
}

fn resolve(common: &CommonArgs, flags: Settings) -> CliResult<Settings> {
    match &common.config {
        Some(path) => Settings::merge(Settings::load(path)?, flags),
        None => Ok(flags),
    }
}

#[derive(Serialize)]
struct Timings {
    load_ms: f64,
    run_ms: f64,
}

#[derive(Serialize)]
struct RunReport<T: Serialize> {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    config: Settings,
    result: T,
    timings: Timings,
}

fn emit<T: Serialize>(report: &RunReport<T>, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    write_or_print(&text, out)
}

fn write_or_print(text: &str, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(|source| {
            CliError::Core(semms::Error::Io {
                path: p.to_path_buf(),
                source,
            })
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn load(s: &mut Settings, mixed: bool) -> CliResult<Dataset> {
    let input = Settings::require(&s.input, "input")?;
    let ycol = Settings::require(&s.ycol, "ycol")?;
    let zcols = Settings::require(&s.zcols, "zcols")?;
    let family = *s.family.get_or_insert(Family::Gaussian);
    let spec = LoadSpec {
        y_col: one_based(ycol)?,
        z_cols: parse_columns(&zcols)?,
        group_col: s.group_col.map(one_based).transpose()?,
        slope_col: s.slope_col.map(one_based).transpose()?,
        family,
        standardize_slope: s.standardize_slope.unwrap_or(false),
    };
    if mixed && spec.group_col.is_none() {
        return Err(CliError::Usage("fit-mixed needs --group-col".into()));
    }
    Ok(load_dataset(&input, &spec)?)
}

#[derive(Serialize)]
struct Selection {
    /// 1-based positions within the candidate columns.
    selected: Vec<usize>,
    selected_names: Vec<String>,
    signs: Vec<i8>,
}

fn selection(d: &Dataset, state: &MixtureState) -> Selection {
    let active: Vec<usize> = state.active().to_vec();
    Selection {
        selected: active.iter().map(|k| k + 1).collect(),
        selected_names: active.iter().map(|&k| d.z_names[k].clone()).collect(),
        signs: active
            .iter()
            .map(|&k| state.label(k).sign() as i8)
            .collect(),
    }
}

#[derive(Serialize)]
struct FitResult {
    #[serde(flatten)]
    selection: Selection,
    params: ModelParams,
    objective_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    em_max_decrease: f64,
}

fn cmd_fit(args: &FitArgs, argv: Vec<String>) -> CliResult<()> {
    let mut flags = Settings::default();
    args.data.apply(&mut flags);
    args.select.apply(&mut flags);
    let mut s = resolve(&args.common, flags)?;
    s.resolve_fit_defaults();

    let t0 = Instant::now();
    let d = load(&mut s, false)?;
    let load_ms = ms(t0);
    let t1 = Instant::now();
    let cfg = s.fit_config();
    let fit: SemmsFit = match d.family {
        Family::Gaussian => fit_semms(&d, &cfg)?,
        _ => fit_semms_glm(&d, &cfg)?,
    };
    let result = FitResult {
        selection: selection(&d, &fit.state),
        params: fit.params.clone(),
        objective_trace: fit.trace.clone(),
        iterations: fit.n_iters,
        converged: fit.converged,
        em_max_decrease: fit.em_max_decrease,
    };
    let report = RunReport {
        command: "fit".into(),
        argv,
        version: env!("CARGO_PKG_VERSION"),
        seed: None,
        config: s,
        result,
        timings: Timings {
            load_ms,
            run_ms: ms(t1),
        },
    };
    emit(&report, args.common.out.as_deref())
}

fn mixed_config(s: &mut Settings) -> CliResult<MixedConfig> {
    let d = MixedConfig::default();
    let re = match &s.re {
        Some(spec) => parse_re(spec)?,
        None => {
            s.re = Some("intercept".into());
            d.re
        }
    };
    let cfg = MixedConfig {
        re,
        conv_tol: *s.conv_tol.get_or_insert(d.conv_tol),
        max_outer: *s.max_outer.get_or_insert(d.max_outer),
        semms: s.fit_config(),
        warm_start: *s.warm_start.get_or_insert(d.warm_start),
        response: *s.response.get_or_insert(d.response),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct MixedResult {
    #[serde(flatten)]
    selection: Selection,
    final_model: FinalModel,
    aic: f64,
    vif: Vec<f64>,
    outer_iterations: usize,
    converged: bool,
    u_change_trace: Vec<f64>,
    selected_per_iteration: Vec<Vec<usize>>,
    re_logliks: Vec<f64>,
}

fn cmd_fit_mixed(args: &FitMixedArgs, argv: Vec<String>) -> CliResult<()> {
    let mut flags = Settings::default();
    args.data.apply(&mut flags);
    args.select.apply(&mut flags);
    args.mixed.apply(&mut flags);
    let mut s = resolve(&args.common, flags)?;
    s.resolve_fit_defaults();
    let cfg = mixed_config(&mut s)?;

    let t0 = Instant::now();
    let d = load(&mut s, true)?;
    let load_ms = ms(t0);
    let t1 = Instant::now();
    let fit = fit_semms_mixed(&d, &cfg)?;
    let result = MixedResult {
        selection: selection(&d, &fit.state),
        final_model: fit.final_model.clone(),
        aic: fit.aic,
        vif: fit.vif.clone(),
        outer_iterations: fit.outer_iters,
        converged: fit.converged,
        u_change_trace: fit.u_trace.clone(),
        selected_per_iteration: fit
            .selected_per_iter
            .iter()
            .map(|v| v.iter().map(|k| k + 1).collect())
            .collect(),
        re_logliks: fit.re_logliks.clone(),
    };
    let report = RunReport {
        command: "fit-mixed".into(),
        argv,
        version: env!("CARGO_PKG_VERSION"),
        seed: None,
        config: s,
        result,
        timings: Timings {
            load_ms,
            run_ms: ms(t1),
        },
    };
    emit(&report, args.common.out.as_deref())
}

fn scenario_from(s: &Settings) -> CliResult<SimScenario> {
    match (&s.scenario, &s.scenario_file) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "give either --scenario or --scenario-file, not both".into(),
        )),
        (Some(name), None) => sim::scenario(name).ok_or_else(|| sim::unknown_scenario(name).into()),
        (None, Some(path)) => Ok(sim::load_scenario(path)?),
        (None, None) => Err(CliError::Usage(format!(
            "missing --scenario (available: {})",
            sim::SCENARIO_NAMES.join(", ")
        ))),
    }
}

#[derive(Serialize)]
struct SimulateResult {
    scenario: SimScenario,
    /// 1-based candidate positions carrying signal.
    truth: Vec<usize>,
    data: PathBuf,
    n_obs: usize,
    /// 1-based columns of the written file.
    ycol: usize,
    group_col: usize,
    slope_col: usize,
    zcols: String,
}

fn cmd_simulate(args: &SimulateArgs, argv: Vec<String>) -> CliResult<()> {
    let mut flags = Settings::default();
    args.scenario.apply(&mut flags);
    flags.seed = args.seed;
    let mut s = resolve(&args.common, flags)?;
    let data_out = Settings::require(&args.data_out, "data-out")?;

    let t0 = Instant::now();
    let mut sc = scenario_from(&s)?;
    sc.seed = *s.seed.get_or_insert(sc.seed);
    let (d, truth) = sim::generate(&sc)?;
    d.write_csv(&data_out)?;
    let result = SimulateResult {
        truth: truth.iter().map(|k| k + 1).collect(),
        data: data_out,
        n_obs: d.n(),
        ycol: 1,
        group_col: 2,
        slope_col: 3,
        zcols: format!("4-{}", 3 + d.k()),
        scenario: sc.clone(),
    };
    let report = RunReport {
        command: "simulate".into(),
        argv,
        version: env!("CARGO_PKG_VERSION"),
        seed: Some(sc.seed),
        config: s,
        result,
        timings: Timings {
            load_ms: 0.0,
            run_ms: ms(t0),
        },
    };
    emit(&report, args.common.out.as_deref())
}

fn cmd_benchmark(args: &BenchmarkArgs, argv: Vec<String>) -> CliResult<()> {
    let mut flags = Settings::default();
    args.scenario.apply(&mut flags);
    args.select.apply(&mut flags);
    args.mixed.apply(&mut flags);
    flags.reps = args.reps;
    flags.base_seed = args.base_seed;
    flags.methods = args.methods.clone();
    flags.nfolds = args.nfolds;
    flags.n_lambda = args.n_lambda;
    flags.lambda_min_ratio = args.lambda_min_ratio;
    let mut s = resolve(&args.common, flags)?;
    s.resolve_fit_defaults();

    let sc = scenario_from(&s)?;
    // the scenario decides which random effects the mixed method uses
    let mut mixed = mixed_config(&mut s)?;
    mixed.re = sc.re;
    s.re = None;
    let reps = *s.reps.get_or_insert(100);
    let base_seed = *s.base_seed.get_or_insert(1);
    let methods_spec = s
        .methods
        .get_or_insert_with(|| "plain,mixed".into())
        .clone();
    let methods = methods_spec
        .split(',')
        .map(|m| BenchMethod::parse(m.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let ld = LassoConfig::default();
    let lasso = LassoConfig {
        nfolds: *s.nfolds.get_or_insert(ld.nfolds),
        n_lambda: *s.n_lambda.get_or_insert(ld.n_lambda),
        lambda_min_ratio: *s.lambda_min_ratio.get_or_insert(ld.lambda_min_ratio),
        ..ld
    };
    let settings = BenchSettings {
        semms: s.fit_config(),
        mixed,
        lasso,
    };

    let t0 = Instant::now();
    let run = || sim::run_benchmark(&sc, &methods, reps, base_seed, &settings);
    let out = match args.workers {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let run_ms = ms(t0);
    if let Some(p) = &args.table_out {
        let text = serde_json::to_string_pretty(&out.table).expect("table serializes");
        write_or_print(&text, Some(p))?;
    }
    if let Some(p) = &args.rows_out {
        out.write_rows_csv(p)?;
    }
    let report = RunReport {
        command: "benchmark".into(),
        argv,
        version: env!("CARGO_PKG_VERSION"),
        seed: Some(base_seed),
        config: s,
        result: &out.table,
        timings: Timings {
            load_ms: 0.0,
            run_ms,
        },
    };
    emit(&report, args.common.out.as_deref())
}

fn run(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, argv),
        Command::FitMixed(a) => cmd_fit_mixed(a, argv),
        Command::Simulate(a) => cmd_simulate(a, argv),
        Command::Benchmark(a) => cmd_benchmark(a, argv),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
