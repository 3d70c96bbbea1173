use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use ctms::config::reference_study;
use ctms::control::{write_plan_log, ControllerKind};
use ctms::experiment::{
    delta_panels, delta_rows, estimation_error_scenarios, run_batch, run_scenario, simultaneous_error_scenarios, write_delta_csv, DeltaRow,
    ScenarioResult, ScenarioSpec,
};
use ctms::metrics::{write_summary_csv, MetricsReport, SummaryRow};
use ctms::plot::write_panels;
use ctms::store::{ExperimentStore, Scalings};
use ctms::{DemandProfile, Error, PeakShape, Result, StudyConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_SOLVER: u8 = 5;

/// Highway stretch with a service station: simulation, receding-horizon ramp
/// metering and day-to-day learning control.
#[derive(Parser)]
#[command(name = "ctms", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one controller for one or more days and store every day.
    Simulate(SimulateArgs),
    /// Tabulate and plot per-day differences of stored scenarios to a baseline.
    Compare(CompareArgs),
    /// Write a synthetic upstream demand profile as CSV.
    GenDemand(GenDemandArgs),
    /// Run the ground-truth baseline and the estimation-error scenarios.
    Batch(BatchArgs),
}

#[derive(Args)]
struct Inputs {
    /// Study config (TOML). Defaults to the shipped reference stretch.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Upstream demand CSV. Defaults to the built-in morning peak.
    #[arg(long)]
    demand: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// uncontrolled, mpc_est, mpc_gt or ilc. The learning controller runs
    /// mpc_est on day 0.
    #[arg(long, default_value = "uncontrolled")]
    controller: ControllerKind,
    #[arg(long, default_value_t = 1)]
    days: usize,
    /// Estimated split ratio as a multiple of the true one.
    #[arg(long, default_value_t = 1.0)]
    r_beta: f64,
    /// Estimated service delay as a multiple of the true one.
    #[arg(long, default_value_t = 1.0)]
    r_delta: f64,
    /// Estimated demand as a multiple of the true one.
    #[arg(long, default_value_t = 1.0)]
    r_demand: f64,
    /// Scenario identifier stored in the manifest. Defaults to the controller name.
    #[arg(long)]
    id: Option<String>,
    /// Stored scenario whose first day is the reference for the differences.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Output directory; must not hold a scenario yet.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Stored scenario whose first day is the reference.
    #[arg(long)]
    baseline: PathBuf,
    /// Directory for deltas.csv and deltas.svg.
    #[arg(long)]
    out: PathBuf,
    /// Plot magnitudes on a logarithmic axis.
    #[arg(long)]
    log: bool,
    /// Stored scenarios to compare.
    #[arg(required = true)]
    scenarios: Vec<PathBuf>,
}

#[derive(Args)]
struct GenDemandArgs {
    /// Number of steps to generate.
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Constant demand at this level [veh/h] instead of a morning peak.
    #[arg(long)]
    flat: Option<f64>,
    #[arg(long)]
    base_level: Option<f64>,
    #[arg(long)]
    peak_level: Option<f64>,
    #[arg(long)]
    shoulder_level: Option<f64>,
    #[arg(long)]
    rise_start: Option<usize>,
    #[arg(long)]
    rise_len: Option<usize>,
    #[arg(long)]
    plateau_len: Option<usize>,
    #[arg(long)]
    transition_len: Option<usize>,
    #[arg(long)]
    shoulder_len: Option<usize>,
    #[arg(long)]
    fall_len: Option<usize>,
    #[arg(long)]
    smoothing: Option<usize>,
    /// Standard deviation of additive Gaussian noise [veh/h].
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    /// One parameter scaled at a time.
    OneAtATime,
    /// All parameters scaled together.
    Simultaneous,
    Both,
}

#[derive(Args)]
struct BatchArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value_t = 5)]
    days: usize,
    #[arg(long, value_enum, default_value = "one-at-a-time")]
    variant: Variant,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Plot magnitudes on a logarithmic axis.
    #[arg(long)]
    log: bool,
    /// Output directory; one subdirectory per scenario.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Toml(_) | Error::Unsupported(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Store(_) | Error::MissingData(_) => EXIT_IO,
        Error::Solver(_) => EXIT_SOLVER,
        _ => EXIT_FAILURE,
    }
}

fn load_inputs(inputs: &Inputs) -> Result<(StudyConfig, DemandProfile)> {
    let study = match &inputs.config {
        Some(p) => StudyConfig::load(p)?,
        None => reference_study(),
    };
    for i in study.highway.cfl_violations() {
        warn!("cell {i} is shorter than one sampling interval of free-flow travel");
    }
    let demand = match &inputs.demand {
        Some(p) => DemandProfile::load(p)?,
        None => PeakShape::default().generate(study.day_length())?,
    };
    Ok((study, demand))
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn write_scenario_tables(dir: &Path, result: &ScenarioResult) -> Result<()> {
    write_file(&dir.join("summary.csv"), |b| write_summary_csv(&result.summary_rows(), b))?;
    write_file(&dir.join("plans.csv"), |b| write_plan_log(&result.plans(), b))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let (study, demand) = load_inputs(&args.inputs)?;
    let baseline = match &args.baseline {
        Some(dir) => Some(baseline_report(&ExperimentStore::open(dir)?, &study)?),
        None => None,
    };
    let spec = ScenarioSpec {
        id: args.id.unwrap_or_else(|| args.controller.to_string()),
        controller: args.controller,
        days: args.days,
        scalings: Scalings { r_beta: args.r_beta, r_delta: args.r_delta, r_demand: args.r_demand },
    };
    let result = run_scenario(&study, &demand, &spec, baseline.as_ref(), Some(&args.out))?;
    write_scenario_tables(&args.out, &result)?;
    for d in &result.days {
        let m = &d.metrics;
        println!("day {} ({}): TTT {:.3} TWT {:.3} TTS {:.3} delta_emax {:.4}", d.outcome.record.day_index, d.controller, m.ttt, m.twt, m.tts, m.delta_emax);
    }
    Ok(())
}

fn baseline_report(store: &ExperimentStore, study: &StudyConfig) -> Result<MetricsReport> {
    if store.manifest().config_hash != study.hash() {
        return Err(Error::Store("baseline was produced with a different config".into()));
    }
    store.load_metrics(0)
}

fn compare(args: CompareArgs) -> Result<()> {
    let base = ExperimentStore::open(&args.baseline)?;
    let reference = base.load_metrics(0)?;
    let mut rows: Vec<DeltaRow> = Vec::new();
    for dir in &args.scenarios {
        let s = ExperimentStore::open(dir)?;
        let (m, b) = (s.manifest(), base.manifest());
        if m.config_hash != b.config_hash || (m.peak_start, m.peak_end) != (b.peak_start, b.peak_end) {
            return Err(Error::Store(format!(
                "{} was run with a different config or window than the baseline",
                dir.display()
            )));
        }
        rows.extend(delta_rows(&m.scenario_id, &s.all_metrics()?, &reference)?);
    }
    fs::create_dir_all(&args.out)?;
    write_file(&args.out.join("deltas.csv"), |b| write_delta_csv(&rows, b))?;
    write_panels(&args.out.join("deltas.svg"), &delta_panels(&rows), args.log)?;
    info!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn gen_demand(args: GenDemandArgs) -> Result<()> {
    let profile = match args.flat {
        Some(level) => DemandProfile::constant(level, args.steps)?,
        None => {
            let d = PeakShape::default();
            let shape = PeakShape {
                base_level: args.base_level.unwrap_or(d.base_level),
                peak_level: args.peak_level.unwrap_or(d.peak_level),
                shoulder_level: args.shoulder_level.unwrap_or(d.shoulder_level),
                rise_start: args.rise_start.unwrap_or(d.rise_start),
                rise_len: args.rise_len.unwrap_or(d.rise_len),
                plateau_len: args.plateau_len.unwrap_or(d.plateau_len),
                transition_len: args.transition_len.unwrap_or(d.transition_len),
                shoulder_len: args.shoulder_len.unwrap_or(d.shoulder_len),
                fall_len: args.fall_len.unwrap_or(d.fall_len),
                smoothing: args.smoothing.unwrap_or(d.smoothing),
                noise_std: args.noise_std.unwrap_or(d.noise_std),
                seed: args.seed.unwrap_or(d.seed),
            };
            shape.generate(args.steps)?
        }
    };
    profile.save(&args.out)
}

fn batch(args: BatchArgs) -> Result<()> {
    let (study, demand) = load_inputs(&args.inputs)?;
    let specs = match args.variant {
        Variant::OneAtATime => estimation_error_scenarios(args.days),
        Variant::Simultaneous => simultaneous_error_scenarios(args.days),
        Variant::Both => [estimation_error_scenarios(args.days), simultaneous_error_scenarios(args.days)].concat(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| Error::Unsupported(format!("cannot start worker pool: {e}")))?;
    let (gt, results) = pool.install(|| run_batch(&study, &demand, &specs, Some(&args.out)))?;
    let baseline = &gt.days[0].metrics;
    let mut summary: Vec<SummaryRow> = gt.summary_rows();
    let mut deltas = Vec::new();
    for r in &results {
        summary.extend(r.summary_rows());
        deltas.extend(delta_rows(&r.spec.id, &r.reports(), baseline)?);
        write_scenario_tables(&args.out.join(&r.spec.id), r)?;
    }
    write_scenario_tables(&args.out.join(&gt.spec.id), &gt)?;
    write_file(&args.out.join("summary.csv"), |b| write_summary_csv(&summary, b))?;
    write_file(&args.out.join("deltas.csv"), |b| write_delta_csv(&deltas, b))?;
    write_panels(&args.out.join("deltas.svg"), &delta_panels(&deltas), args.log)?;
    println!("scenario,day,delta_ttt,delta_twt,delta_tts,delta_emax");
    for d in &deltas {
        println!("{},{},{:.4},{:.4},{:.4},{:.4}", d.scenario, d.day, d.delta_ttt, d.delta_twt, d.delta_tts, d.delta_emax);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::GenDemand(a) => gen_demand(a),
        Command::Batch(a) => batch(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
