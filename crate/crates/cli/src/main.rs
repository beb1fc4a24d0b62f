//! `mkz`: projection, planning and benchmarks for multi-robot teams carrying
//! a rigid structure.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success (projection converged, plan found, bench finished) |
//! | 1 | runtime failure (I/O, unexpected internal error) |
//! | 2 | usage error: bad flags, unreadable or invalid scenario, bad parameter ranges |
//! | 3 | projection stopped with its budget exhausted |
//! | 4 | projection stalled on a singular row |
//! | 5 | planner exhausted its node budget without reaching the goal |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mkz_core::bench::{self, BenchResult, BenchSpec, EnvClass, Experiment};
use mkz_core::kinematics::SystemConfiguration;
use mkz_core::planner::{self, PathFile, PlanError, PlannerParams};
use mkz_core::scenarios::{save_scenario, sample_trial_configuration, Complexity, Scenario, ScenarioError};
use mkz_core::solvers::{self, Method, SolverParams, Status};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_SINGULAR: u8 = 4;
const EXIT_NO_PATH: u8 = 5;

#[derive(Parser)]
#[command(name = "mkz", version, about = "Constraint projection and planning for multi-robot structure transport")]
struct Cli {
    /// Print progress and summaries to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    /// Default directory for outputs not given an explicit path.
    #[arg(long, global = true, env = "MKZ_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project one configuration onto the scenario's constraint manifolds.
    Project(ProjectArgs),
    /// Plan from the scenario's start to its goal.
    Plan(PlanArgs),
    /// Run a projection or planning benchmark grid.
    Bench(BenchArgs),
    /// Generate a cluttered environment and write the scenario with it.
    GenEnv(GenEnvArgs),
    /// Render a path file to SVG, or rebuild a bench summary.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMethod {
    Cnkz,
    Nkz,
    Nr,
    Cim,
}

impl From<CliMethod> for Method {
    fn from(m: CliMethod) -> Self {
        match m {
            CliMethod::Cnkz => Method::Cnkz,
            CliMethod::Nkz => Method::Nkz,
            CliMethod::Nr => Method::Nr,
            CliMethod::Cim => Method::Cim,
        }
    }
}

#[derive(Args)]
struct SolverFlags {
    #[arg(long, value_enum, default_value = "cnkz")]
    method: CliMethod,
    /// Budget in cycles.
    #[arg(long, default_value_t = 2000)]
    max_steps: usize,
    /// Single threshold for NKZ, NR and CIM (default: smallest manifold threshold).
    #[arg(long)]
    global_threshold: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    nr_step_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    cim_relaxation: f64,
    /// Shuffle the row order every cycle.
    #[arg(long)]
    randomized_order: bool,
    /// Refresh only rows coupled to the updated row.
    #[arg(long)]
    fast: bool,
    /// Drive Kaczmarz steps by the last accepted residual.
    #[arg(long)]
    stale_residual: bool,
}

impl SolverFlags {
    fn params(&self, seed: u64) -> SolverParams {
        SolverParams {
            method: self.method.into(),
            max_steps: self.max_steps,
            global_threshold: self.global_threshold,
            nr_step_scale: self.nr_step_scale,
            cim_relaxation: self.cim_relaxation,
            rng_seed: seed,
            randomized_order: self.randomized_order,
            fast_mode: self.fast,
            stale_residual: self.stale_residual,
            record_trace: false,
        }
    }
}

#[derive(Args)]
struct ProjectArgs {
    /// Reference id (T_3, S_3, S_4, I_5, S_5, S_6) or scenario file.
    #[arg(long, default_value = "S_3")]
    scenario: String,
    /// Override the manifold set, e.g. `M1+M3`.
    #[arg(long)]
    manifolds: Option<String>,
    /// Start configuration file (JSON list of robots); random when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the random start and the solver.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    #[arg(long, default_value_t = 3.0)]
    margin: f64,
    #[command(flatten)]
    solver: SolverFlags,
    /// Report file (default: <out-dir>/projection_report.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-row residual trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the residual norm plot as SVG.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Zero timing fields so reports can be diffed.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, default_value = "S_3")]
    scenario: String,
    /// Replace the scenario's environment with a generated one.
    #[arg(long)]
    complexity: Option<Complexity>,
    /// Seed for environment generation (defaults to --seed).
    #[arg(long)]
    env_seed: Option<u64>,
    /// Planner seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    max_nodes: usize,
    #[arg(long, default_value_t = 0.3)]
    steer_step: f64,
    #[arg(long, default_value_t = 0.1)]
    goal_bias: f64,
    #[arg(long, default_value_t = 0.2)]
    goal_tolerance: f64,
    /// Plain RRT: no projection, no constraints, no structure.
    #[arg(long)]
    no_projection: bool,
    #[command(flatten)]
    solver: SolverFlags,
    /// Path file (default: <out-dir>/path.json).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    no_timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliExperiment {
    Projection,
    Planning,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum)]
    experiment: CliExperiment,
    /// JSON bench spec; flags given explicitly override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Comma-separated reference ids or scenario files.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<String>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<CliMethod>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Repeatable manifold set, e.g. `--manifold-set M1+M3`.
    #[arg(long = "manifold-set")]
    manifold_sets: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    threshold_scales: Option<Vec<f64>>,
    /// Comma-separated: empty, low, medium, hard.
    #[arg(long, value_delimiter = ',')]
    complexities: Option<Vec<EnvClass>>,
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Maximum concurrent trials.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (default: <out-dir>).
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenEnvArgs {
    #[arg(long, default_value = "S_3")]
    scenario: String,
    #[arg(long)]
    complexity: Complexity,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenario file (default: <out-dir>/<scenario>_<complexity>_<seed>.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Path file to draw.
    #[arg(long, conflicts_with = "bench_dir", required_unless_present = "bench_dir")]
    path: Option<PathBuf>,
    /// Scenario the path was planned in (default: the reference named in the path file).
    #[arg(long)]
    scenario: Option<String>,
    /// Bench output directory whose trials CSV is summarized.
    #[arg(long)]
    bench_dir: Option<PathBuf>,
    /// Output file (default: <out-dir>/path.svg or <bench-dir>/summary.md).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: EXIT_FAILURE, error: e.into() }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_USAGE, error: e.into() }
}

fn scenario_failure(e: ScenarioError) -> Failure {
    match e {
        ScenarioError::Io { .. } => Failure { code: EXIT_FAILURE, error: e.into() },
        _ => usage(e),
    }
}

fn load(name: &str) -> Result<Scenario, Failure> {
    match bench::resolve_scenario(name) {
        Ok(s) => Ok(s),
        Err(bench::BenchError::Scenario(e)) => Err(scenario_failure(e)),
        Err(e) => Err(usage(e)),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_project(cli: &Cli, a: &ProjectArgs) -> Result<u8, Failure> {
    let mut scenario = load(&a.scenario)?;
    if let Some(m) = &a.manifolds {
        let kinds = bench::parse_manifold_set(m).map_err(|e| usage(anyhow::anyhow!(e)))?;
        scenario = scenario.with_manifolds(&kinds);
    }
    let sys = scenario.system().map_err(usage)?;
    let q0 = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let q: SystemConfiguration = serde_path_to_error::deserialize(de)
                .map_err(|e| usage(anyhow::anyhow!("{}: at `{}`: {}", p.display(), e.path(), e.inner())))?;
            q
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            sample_trial_configuration(&scenario, &mut rng, a.spread, a.margin)
        }
    };
    let mut params = a.solver.params(a.seed);
    params.record_trace = a.trace.is_some() || a.plot.is_some();
    params.validate().map_err(usage)?;
    let mut report = solvers::project(&sys, &q0, &params).map_err(usage)?;
    if let Some(t) = &a.trace {
        let mut buf = Vec::new();
        solvers::residual_trace_export(&report, &sys, &mut buf)?;
        write_text(t, &String::from_utf8(buf)?)?;
    }
    if let Some(p) = &a.plot {
        let pts: Vec<_> = report.trace.iter().map(|t| (t.step, t.norm)).collect();
        let title = format!("{} {}", scenario.id, report.method);
        write_text(p, &bench::residual_plot_svg(&title, &[(title.as_str(), &pts)]))?;
    }
    if a.no_timing {
        report = report.without_timing();
    }
    report.trace.clear();
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("projection_report.json"));
    write_text(&out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!(
        "{} {}: {:?} after {} updates, residual norm {:.3e} -> {:.3e}",
        scenario.id, report.method, report.status, report.updates, report.initial_norm, report.final_norm
    );
    if cli.verbose {
        for m in &report.per_manifold {
            eprintln!("  {} max |h| {:.3e} (threshold {:.1e})", m.kind, m.max_abs, m.threshold);
        }
    }
    Ok(match report.status {
        Status::Converged => 0,
        Status::BudgetExhausted => EXIT_BUDGET,
        Status::SingularStall => EXIT_SINGULAR,
    })
}

fn cmd_plan(cli: &Cli, a: &PlanArgs) -> Result<u8, Failure> {
    let mut scenario = load(&a.scenario)?;
    if let Some(c) = a.complexity {
        scenario = scenario.with_environment(c, a.env_seed.unwrap_or(a.seed)).map_err(scenario_failure)?;
    }
    if a.no_projection {
        scenario.manifolds.clear();
    }
    let params = PlannerParams {
        max_nodes: a.max_nodes,
        steer_step: a.steer_step,
        goal_bias: a.goal_bias,
        goal_tolerance: a.goal_tolerance,
        projection: !a.no_projection,
        projection_solver: a.solver.params(a.seed),
        rng_seed: a.seed,
        ..PlannerParams::default()
    };
    let result = planner::plan_scenario(&scenario, &params).map_err(|e| match e {
        PlanError::Io { .. } => Failure::from(e),
        other => usage(other),
    })?;
    let st = &result.stats;
    println!(
        "{}: {} with {} nodes, path of {} waypoints, {}/{} projections converged",
        scenario.id,
        if result.success { "reached goal" } else { "no path" },
        result.nodes.len(),
        result.path.len(),
        st.projections_succeeded,
        st.projections_attempted
    );
    if !result.success {
        return Ok(EXIT_NO_PATH);
    }
    let mut file = planner::path_export(&scenario, &result, &params)?;
    if a.no_timing {
        file.stats = file.stats.without_timing();
    }
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("path.json"));
    write_text(&out, &(file.to_json() + "\n"))?;
    if let Some(svg) = &a.svg {
        write_text(svg, &planner::render_path_svg(&scenario, &file))?;
    }
    if cli.verbose {
        eprintln!("wrote {}", out.display());
    }
    Ok(0)
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<u8, Failure> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de)
                .map_err(|e| usage(anyhow::anyhow!("{}: at `{}`: {}", p.display(), e.path(), e.inner())))?
        }
        None => match a.experiment {
            CliExperiment::Projection => BenchSpec::projection(),
            CliExperiment::Planning => BenchSpec::planning(),
        },
    };
    spec.experiment = match a.experiment {
        CliExperiment::Projection => Experiment::ProjectionCompare,
        CliExperiment::Planning => Experiment::PlanningCompare,
    };
    if let Some(s) = &a.scenarios {
        spec.scenarios = s.clone();
    }
    if let Some(m) = &a.methods {
        spec.methods = m.iter().map(|&m| m.into()).collect();
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(sets) = &a.manifold_sets {
        spec.manifold_sets = sets
            .iter()
            .map(|s| bench::parse_manifold_set(s))
            .collect::<Result<_, _>>()
            .map_err(|e| usage(anyhow::anyhow!(e)))?;
    }
    if let Some(s) = &a.threshold_scales {
        spec.threshold_scales = s.clone();
    }
    if let Some(c) = &a.complexities {
        spec.env_classes = c.clone();
    }
    if let Some(n) = a.max_nodes {
        spec.planner.max_nodes = n;
    }
    if a.jobs.is_some() {
        spec.jobs = a.jobs;
    }
    let dir = a.dir.clone().or_else(|| spec.output_dir.clone()).unwrap_or_else(|| cli.out_dir.clone());
    spec.output_dir = Some(dir.clone());
    spec.validate().map_err(usage)?;
    let result = bench::run(&spec)?;
    let files = bench::write_outputs(&result, &dir)?;
    let summary = match &result {
        BenchResult::Projection(b) => bench::summarize_projection(&b.cells),
        BenchResult::Planning(b) => bench::summarize_planning(&b.cells),
    };
    print!("{summary}");
    if cli.verbose {
        for f in files {
            eprintln!("wrote {}", f.display());
        }
    }
    Ok(0)
}

fn cmd_gen_env(cli: &Cli, a: &GenEnvArgs) -> Result<u8, Failure> {
    let scenario = load(&a.scenario)?.with_environment(a.complexity, a.seed).map_err(scenario_failure)?;
    let out = a.out.clone().unwrap_or_else(|| {
        cli.out_dir.join(format!("{}_{}_{}.json", scenario.id, a.complexity.label().to_lowercase(), a.seed))
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_scenario(&scenario, &out).map_err(scenario_failure)?;
    println!(
        "{}: {} obstacles, clutter ratio {:.4} -> {}",
        scenario.id,
        scenario.environment.obstacles.len(),
        scenario.environment.clutter_ratio,
        out.display()
    );
    Ok(0)
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> Result<u8, Failure> {
    if let Some(dir) = &a.bench_dir {
        let summary = bench::summarize_dir(dir)?;
        let out = a.out.clone().unwrap_or_else(|| dir.join(bench::SUMMARY_MD));
        write_text(&out, &summary)?;
        print!("{summary}");
        return Ok(0);
    }
    let path = a.path.as_ref().expect("clap enforces --path or --bench-dir");
    let file = PathFile::read(path).map_err(usage)?;
    let scenario = load(a.scenario.as_deref().unwrap_or(&file.scenario_id))?;
    let team = file.waypoints.first().map(|w| w.robots.team_size());
    if team.is_some_and(|n| n != scenario.team_size) {
        return Err(usage(anyhow::anyhow!(
            "path has {} robots but scenario {} has {}",
            team.unwrap_or(0),
            scenario.id,
            scenario.team_size
        )));
    }
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("path.svg"));
    write_text(&out, &planner::render_path_svg(&scenario, &file))?;
    println!("{} waypoints -> {}", file.waypoints.len(), out.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Project(a) => cmd_project(&cli, a),
        Command::Plan(a) => cmd_plan(&cli, a),
        Command::Bench(a) => cmd_bench(&cli, a),
        Command::GenEnv(a) => cmd_gen_env(&cli, a),
        Command::Render(a) => cmd_render(&cli, a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let kind = if f.code == EXIT_USAGE { "usage error" } else { "error" };
            eprintln!("mkz: {kind}: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
