//! Benchmark harness: projection comparisons over manifold sets and solvers,
//! and planning comparisons over scenarios and clutter levels.
//!
//! Every trial is keyed by its seed and runs in isolation, so trials can run
//! on the rayon pool in any order; records are collected back in trial order.
//! Aggregates are computed from the per-trial records alone, which is what
//! lets `summarize` rebuild every table from the trials CSV.
//!
//! Statistics: means and standard deviations are taken over successful trials
//! only, std with the n−1 denominator (0 for a single sample). A cell with no
//! successes renders as `--`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::ManifoldKind;
use crate::planner::{audit_path, plan_scenario, PlanError, PlannerParams};
use crate::scenarios::{load_scenario, sample_trial_configuration, Complexity, Scenario, ScenarioError};
use crate::solvers::{project, Method, SolverParams, Status};
use crate::svg::{Svg, PALETTE};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BenchError {
    BenchError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ProjectionCompare,
    PlanningCompare,
}

/// Clutter class of a planning cell; `Empty` is the obstacle-free baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvClass {
    Empty,
    Low,
    Medium,
    Hard,
}

impl EnvClass {
    pub fn complexity(self) -> Option<Complexity> {
        match self {
            EnvClass::Empty => None,
            EnvClass::Low => Some(Complexity::Low),
            EnvClass::Medium => Some(Complexity::Medium),
            EnvClass::Hard => Some(Complexity::Hard),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EnvClass::Empty => "Empty",
            EnvClass::Low => "Low",
            EnvClass::Medium => "Medium",
            EnvClass::Hard => "Hard",
        }
    }
}

impl std::str::FromStr for EnvClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "empty" | "none" => Ok(EnvClass::Empty),
            other => other.parse::<Complexity>().map(|c| match c {
                Complexity::Low => EnvClass::Low,
                Complexity::Medium => EnvClass::Medium,
                Complexity::Hard => EnvClass::Hard,
            }),
        }
    }
}

/// `"M1+M3"`, or `"none"` for the empty set.
pub fn manifold_set_label(kinds: &[ManifoldKind]) -> String {
    if kinds.is_empty() {
        return "none".into();
    }
    kinds.iter().map(|k| k.label()).collect::<Vec<_>>().join("+")
}

pub fn parse_manifold_set(s: &str) -> Result<Vec<ManifoldKind>, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    s.split(['+', ','])
        .map(|t| ManifoldKind::from_label(t.trim()).ok_or_else(|| format!("unknown manifold `{}`", t.trim())))
        .collect()
}

/// The four manifold sets of the projection comparison.
pub fn default_manifold_sets() -> Vec<Vec<ManifoldKind>> {
    use ManifoldKind::*;
    vec![
        vec![StructureFixedDistance, TaskFixedOrient],
        vec![TaskFixedOrient, TaskSamePlane],
        vec![StructureFixedDistance, StructureFixedAngle, TaskFixedOrient],
        vec![StructureFixedDistance, StructureFixedAngle, TaskFixedOrient, TaskSamePlane],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub experiment: Experiment,
    /// Reference ids or scenario file paths.
    pub scenarios: Vec<String>,
    pub methods: Vec<Method>,
    /// Trials per cell: sampled configurations for projection, environments for planning.
    pub trials: usize,
    pub seed: u64,
    /// Projection only.
    pub manifold_sets: Vec<Vec<ManifoldKind>>,
    /// Multipliers applied to every manifold threshold (projection only).
    pub threshold_scales: Vec<f64>,
    /// Per-axis offset of each base from its nominal holding position.
    pub spread: f64,
    /// Inset of sampled structure positions from the workspace bounds.
    pub margin: f64,
    pub solver: SolverParams,
    /// Planning only.
    pub env_classes: Vec<EnvClass>,
    pub planner: PlannerParams,
    pub audit: bool,
    pub output_dir: Option<PathBuf>,
    /// Worker threads; `None` uses the global rayon pool.
    pub jobs: Option<usize>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self::projection()
    }
}

impl BenchSpec {
    pub fn projection() -> Self {
        Self {
            experiment: Experiment::ProjectionCompare,
            scenarios: vec!["S_3".into()],
            methods: Method::ALL.to_vec(),
            trials: 200,
            seed: 0,
            manifold_sets: default_manifold_sets(),
            threshold_scales: vec![1.0],
            spread: 0.5,
            margin: 3.0,
            solver: SolverParams::default(),
            env_classes: vec![EnvClass::Low, EnvClass::Medium, EnvClass::Hard],
            planner: PlannerParams::default(),
            audit: true,
            output_dir: None,
            jobs: None,
        }
    }

    pub fn planning() -> Self {
        Self {
            experiment: Experiment::PlanningCompare,
            scenarios: crate::scenarios::REFERENCE_IDS.iter().map(|s| s.to_string()).collect(),
            methods: vec![Method::Cnkz, Method::Nkz],
            trials: 20,
            ..Self::projection()
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Spec(m.into()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.scenarios.is_empty() || self.methods.is_empty() {
            return bad("at least one scenario and one method are required");
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1");
        }
        match self.experiment {
            Experiment::ProjectionCompare => {
                if self.manifold_sets.is_empty() || self.threshold_scales.is_empty() {
                    return bad("projection benchmarks need manifold sets and threshold scales");
                }
                if self.threshold_scales.iter().any(|s| !(*s > 0.0)) {
                    return bad("threshold scales must be positive");
                }
                if !(self.spread >= 0.0) || !(self.margin >= 0.0) {
                    return bad("spread and margin must be non-negative");
                }
            }
            Experiment::PlanningCompare => {
                if self.env_classes.is_empty() {
                    return bad("planning benchmarks need at least one environment class");
                }
                self.planner.validate().map_err(|e| BenchError::Spec(e.to_string()))?;
            }
        }
        self.solver.validate().map_err(|e| BenchError::Spec(e.to_string()))?;
        for s in &self.scenarios {
            resolve_scenario(s)?;
        }
        Ok(())
    }
}

/// A reference id, or else a path to a scenario file.
pub fn resolve_scenario(name: &str) -> Result<Scenario, BenchError> {
    if crate::scenarios::REFERENCE_IDS.contains(&name) {
        return Ok(Scenario::reference(name)?);
    }
    let path = Path::new(name);
    if path.exists() {
        return Ok(load_scenario(path)?);
    }
    Err(BenchError::Spec(format!("scenario `{name}` is neither a reference id nor a file")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub wall_time_s: f64,
}

fn metadata(threads: usize, wall_time_s: f64) -> Metadata {
    Metadata {
        crate_version: env!("CARGO_PKG_VERSION").into(),
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        threads,
        wall_time_s,
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> (T, usize) {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool");
            (pool.install(f), n)
        }
        None => (f(), rayon::current_num_threads()),
    }
}

/// Mean and n−1 standard deviation; `None` for an empty sample.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

fn split(m: Option<(f64, f64)>) -> (Option<f64>, Option<f64>) {
    (m.map(|p| p.0), m.map(|p| p.1))
}

// ---------------------------------------------------------------------------
// Projection comparison

/// One row of `projection_trials.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionTrial {
    pub scenario: String,
    pub manifolds: String,
    pub rows: usize,
    pub method: Method,
    pub threshold_scale: f64,
    pub trial: usize,
    pub seed: u64,
    /// `converged`, `budget_exhausted`, `singular_stall` or `error`.
    pub status: String,
    pub converged: bool,
    pub updates: usize,
    pub steps: usize,
    pub residual_evals: usize,
    pub initial_norm: f64,
    pub final_norm: f64,
    pub wall_time_s: f64,
    pub m1_mean_abs: Option<f64>,
    pub m2_mean_abs: Option<f64>,
    pub m3_mean_abs: Option<f64>,
    pub m4_mean_abs: Option<f64>,
    pub m5_mean_abs: Option<f64>,
    pub error: Option<String>,
}

impl ProjectionTrial {
    pub fn manifold_mean_abs(&self, kind: ManifoldKind) -> Option<f64> {
        match kind {
            ManifoldKind::StructureFixedDistance => self.m1_mean_abs,
            ManifoldKind::StructureFixedAngle => self.m2_mean_abs,
            ManifoldKind::TaskFixedOrient => self.m3_mean_abs,
            ManifoldKind::TaskSamePlane => self.m4_mean_abs,
            ManifoldKind::RobotDiffDrive => self.m5_mean_abs,
        }
    }

    fn set_manifold_mean_abs(&mut self, kind: ManifoldKind, v: f64) {
        let slot = match kind {
            ManifoldKind::StructureFixedDistance => &mut self.m1_mean_abs,
            ManifoldKind::StructureFixedAngle => &mut self.m2_mean_abs,
            ManifoldKind::TaskFixedOrient => &mut self.m3_mean_abs,
            ManifoldKind::TaskSamePlane => &mut self.m4_mean_abs,
            ManifoldKind::RobotDiffDrive => &mut self.m5_mean_abs,
        };
        *slot = Some(v);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldStat {
    pub kind: ManifoldKind,
    pub mean: f64,
    pub std: f64,
}

/// Aggregate of one (scenario, manifold set, method, threshold scale) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCell {
    pub scenario: String,
    pub manifolds: String,
    pub rows: usize,
    pub method: Method,
    pub threshold_scale: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_time_s: Option<f64>,
    pub std_time_s: Option<f64>,
    pub mean_updates: Option<f64>,
    pub std_updates: Option<f64>,
    pub mean_residual_evals: Option<f64>,
    /// Mean |residual| per manifold over converged trials.
    pub residuals: Vec<ManifoldStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBench {
    pub spec: BenchSpec,
    pub trials: Vec<ProjectionTrial>,
    pub cells: Vec<ProjectionCell>,
    /// Residual norm per step for trial 0 of each cell, when an output directory is set.
    pub traces: Vec<(String, Vec<(usize, f64)>)>,
    pub metadata: Metadata,
}

impl ProjectionBench {
    pub fn cell(&self, manifolds: &str, method: Method, scale: f64) -> Option<&ProjectionCell> {
        self.cells.iter().find(|c| c.manifolds == manifolds && c.method == method && c.threshold_scale == scale)
    }

    /// Trials and cells with timing fields zeroed.
    pub fn without_timing(&self) -> (Vec<ProjectionTrial>, Vec<ProjectionCell>) {
        let trials: Vec<_> = self.trials.iter().map(|t| ProjectionTrial { wall_time_s: 0.0, ..t.clone() }).collect();
        let cells = aggregate_projection(&trials);
        (trials, cells)
    }
}

struct ProjectionJob {
    scenario: Scenario,
    set: Vec<ManifoldKind>,
    method: Method,
    scale: f64,
    trial: usize,
    seed: u64,
    trace: bool,
}

fn scaled(scenario: &Scenario, set: &[ManifoldKind], scale: f64) -> Scenario {
    let mut s = scenario.with_manifolds(set);
    for m in &mut s.manifolds {
        m.threshold = Some(m.kind.default_threshold() * scale);
    }
    s
}

fn run_projection_trial(job: &ProjectionJob, spec: &BenchSpec) -> (ProjectionTrial, Option<Vec<(usize, f64)>>) {
    let mut rec = ProjectionTrial {
        scenario: job.scenario.id.clone(),
        manifolds: manifold_set_label(&job.set),
        rows: 0,
        method: job.method,
        threshold_scale: job.scale,
        trial: job.trial,
        seed: job.seed,
        status: "converged".into(),
        converged: true,
        updates: 0,
        steps: 0,
        residual_evals: 0,
        initial_norm: 0.0,
        final_norm: 0.0,
        wall_time_s: 0.0,
        m1_mean_abs: None,
        m2_mean_abs: None,
        m3_mean_abs: None,
        m4_mean_abs: None,
        m5_mean_abs: None,
        error: None,
    };
    // The empty set is satisfied by every configuration.
    if job.set.is_empty() {
        return (rec, None);
    }
    let scenario = scaled(&job.scenario, &job.set, job.scale);
    let fail = |mut rec: ProjectionTrial, e: String| {
        rec.status = "error".into();
        rec.converged = false;
        rec.error = Some(e);
        (rec, None)
    };
    let sys = match scenario.system() {
        Ok(s) => s,
        Err(e) => return fail(rec, e.to_string()),
    };
    rec.rows = sys.total_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let q0 = sample_trial_configuration(&scenario, &mut rng, spec.spread, spec.margin);
    let params =
        SolverParams { method: job.method, rng_seed: job.seed, record_trace: job.trace, ..spec.solver.clone() };
    let rep = match project(&sys, &q0, &params) {
        Ok(r) => r,
        Err(e) => return fail(rec, e.to_string()),
    };
    rec.status = match rep.status {
        Status::Converged => "converged",
        Status::BudgetExhausted => "budget_exhausted",
        Status::SingularStall => "singular_stall",
    }
    .into();
    rec.converged = rep.converged();
    rec.updates = rep.updates;
    rec.steps = rep.steps_used;
    rec.residual_evals = rep.residual_evals;
    rec.initial_norm = rep.initial_norm;
    rec.final_norm = rep.final_norm;
    rec.wall_time_s = rep.wall_time_s;
    for m in &rep.per_manifold {
        rec.set_manifold_mean_abs(m.kind, m.mean_abs);
    }
    let trace = job.trace.then(|| rep.trace.iter().map(|t| (t.step, t.norm)).collect());
    (rec, trace)
}

pub fn run_projection_benchmark(spec: &BenchSpec) -> Result<ProjectionBench, BenchError> {
    spec.validate()?;
    let started = Instant::now();
    let mut jobs = Vec::new();
    for name in &spec.scenarios {
        let scenario = resolve_scenario(name)?;
        for set in &spec.manifold_sets {
            for &scale in &spec.threshold_scales {
                for &method in &spec.methods {
                    for trial in 0..spec.trials {
                        jobs.push(ProjectionJob {
                            scenario: scenario.clone(),
                            set: set.clone(),
                            method,
                            scale,
                            trial,
                            seed: spec.seed.wrapping_add(trial as u64),
                            trace: trial == 0 && spec.output_dir.is_some(),
                        });
                    }
                }
            }
        }
    }
    let (results, threads) =
        with_pool(spec.jobs, || jobs.par_iter().map(|j| run_projection_trial(j, spec)).collect::<Vec<_>>());
    let mut trials = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for (rec, trace) in results {
        if let Some(t) = trace {
            traces.push((format!("{} {} x{} {}", rec.scenario, rec.manifolds, rec.threshold_scale, rec.method), t));
        }
        trials.push(rec);
    }
    let cells = aggregate_projection(&trials);
    Ok(ProjectionBench {
        spec: spec.clone(),
        trials,
        cells,
        traces,
        metadata: metadata(threads, started.elapsed().as_secs_f64()),
    })
}

/// Groups trial records into cells, in first-appearance order.
pub fn aggregate_projection(trials: &[ProjectionTrial]) -> Vec<ProjectionCell> {
    let mut keys: Vec<(String, String, Method, f64)> = Vec::new();
    for t in trials {
        let k = (t.scenario.clone(), t.manifolds.clone(), t.method, t.threshold_scale);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(scenario, manifolds, method, scale)| {
            let group: Vec<&ProjectionTrial> = trials
                .iter()
                .filter(|t| t.scenario == scenario && t.manifolds == manifolds && t.method == method && t.threshold_scale == scale)
                .collect();
            let ok: Vec<&&ProjectionTrial> = group.iter().filter(|t| t.converged).collect();
            let times: Vec<f64> = ok.iter().map(|t| t.wall_time_s).collect();
            let updates: Vec<f64> = ok.iter().map(|t| t.updates as f64).collect();
            let evals: Vec<f64> = ok.iter().map(|t| t.residual_evals as f64).collect();
            let (mean_time_s, std_time_s) = split(mean_std(&times));
            let (mean_updates, std_updates) = split(mean_std(&updates));
            let residuals = ManifoldKind::ALL
                .into_iter()
                .filter_map(|kind| {
                    let xs: Vec<f64> = ok.iter().filter_map(|t| t.manifold_mean_abs(kind)).collect();
                    mean_std(&xs).map(|(mean, std)| ManifoldStat { kind, mean, std })
                })
                .collect();
            ProjectionCell {
                rows: group[0].rows,
                scenario,
                manifolds,
                method,
                threshold_scale: scale,
                trials: group.len(),
                successes: ok.len(),
                success_rate: 100.0 * ok.len() as f64 / group.len() as f64,
                mean_time_s,
                std_time_s,
                mean_updates,
                std_updates,
                mean_residual_evals: mean_std(&evals).map(|p| p.0),
                residuals,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Planning comparison

/// One row of `planning_runs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningRun {
    pub scenario: String,
    pub rows: usize,
    pub env_class: EnvClass,
    pub method: Method,
    pub env_seed: u64,
    pub clutter_ratio: f64,
    pub success: bool,
    pub nodes: usize,
    pub path_len: usize,
    pub iterations: usize,
    pub projections_attempted: usize,
    pub projections_succeeded: usize,
    pub projection_success_rate: f64,
    /// Single-row updates per successful projection.
    pub updates_per_projection: Option<f64>,
    pub time_per_projection_s: Option<f64>,
    pub plan_time_s: f64,
    pub audit_violations: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningCell {
    pub scenario: String,
    pub rows: usize,
    pub env_class: EnvClass,
    pub method: Method,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_plan_time_s: Option<f64>,
    pub std_plan_time_s: Option<f64>,
    pub mean_projection_success_rate: f64,
    /// Over all runs that attempted at least one projection.
    pub mean_updates_per_projection: Option<f64>,
    pub std_updates_per_projection: Option<f64>,
    pub mean_time_per_projection_s: Option<f64>,
    pub audit_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningBench {
    pub spec: BenchSpec,
    pub runs: Vec<PlanningRun>,
    pub cells: Vec<PlanningCell>,
    pub metadata: Metadata,
}

impl PlanningBench {
    pub fn cell(&self, scenario: &str, class: EnvClass, method: Method) -> Option<&PlanningCell> {
        self.cells.iter().find(|c| c.scenario == scenario && c.env_class == class && c.method == method)
    }

    pub fn without_timing(&self) -> (Vec<PlanningRun>, Vec<PlanningCell>) {
        let runs: Vec<_> = self
            .runs
            .iter()
            .map(|r| PlanningRun {
                plan_time_s: 0.0,
                time_per_projection_s: r.time_per_projection_s.map(|_| 0.0),
                ..r.clone()
            })
            .collect();
        let cells = aggregate_planning(&runs);
        (runs, cells)
    }
}

struct PlanningJob {
    scenario: Scenario,
    class: EnvClass,
    method: Method,
    env_seed: u64,
}

fn run_planning_trial(job: &PlanningJob, spec: &BenchSpec) -> PlanningRun {
    let mut run = PlanningRun {
        scenario: job.scenario.id.clone(),
        rows: job.scenario.system().map(|s| s.total_rows()).unwrap_or(0),
        env_class: job.class,
        method: job.method,
        env_seed: job.env_seed,
        clutter_ratio: 0.0,
        success: false,
        nodes: 0,
        path_len: 0,
        iterations: 0,
        projections_attempted: 0,
        projections_succeeded: 0,
        projection_success_rate: 0.0,
        updates_per_projection: None,
        time_per_projection_s: None,
        plan_time_s: 0.0,
        audit_violations: 0,
        error: None,
    };
    let scenario = match job.class.complexity() {
        Some(c) => match job.scenario.with_environment(c, job.env_seed) {
            Ok(s) => s,
            Err(e) => {
                run.error = Some(e.to_string());
                return run;
            }
        },
        None => job.scenario.clone(),
    };
    run.clutter_ratio = scenario.environment.clutter_ratio;
    let params = PlannerParams {
        rng_seed: job.env_seed,
        projection_solver: SolverParams { method: job.method, ..spec.solver.clone() },
        ..spec.planner.clone()
    };
    let result = match plan_scenario(&scenario, &params) {
        Ok(r) => r,
        Err(e) => {
            run.error = Some(e.to_string());
            return run;
        }
    };
    let st = &result.stats;
    run.success = result.success;
    run.nodes = result.nodes.len();
    run.path_len = result.path.len();
    run.iterations = st.iterations;
    run.projections_attempted = st.projections_attempted;
    run.projections_succeeded = st.projections_succeeded;
    run.projection_success_rate = st.projection_success_rate();
    if st.projections_succeeded > 0 {
        run.updates_per_projection = Some(st.projection_updates as f64 / st.projections_succeeded as f64);
    }
    if st.projections_attempted > 0 {
        run.time_per_projection_s = Some(st.projection_time_s / st.projections_attempted as f64);
    }
    run.plan_time_s = st.wall_time_s;
    if spec.audit && result.success {
        let configs: Vec<_> = result.path_configs().into_iter().cloned().collect();
        match audit_path(&scenario, &configs) {
            Ok(v) => run.audit_violations = v.len(),
            Err(e) => run.error = Some(e.to_string()),
        }
    }
    run
}

pub fn run_planning_benchmark(spec: &BenchSpec) -> Result<PlanningBench, BenchError> {
    spec.validate()?;
    let started = Instant::now();
    let mut jobs = Vec::new();
    for name in &spec.scenarios {
        let scenario = resolve_scenario(name)?;
        for &class in &spec.env_classes {
            for &method in &spec.methods {
                for k in 0..spec.trials {
                    jobs.push(PlanningJob {
                        scenario: scenario.clone(),
                        class,
                        method,
                        env_seed: spec.seed.wrapping_add(k as u64),
                    });
                }
            }
        }
    }
    let (runs, threads) =
        with_pool(spec.jobs, || jobs.par_iter().map(|j| run_planning_trial(j, spec)).collect::<Vec<_>>());
    let cells = aggregate_planning(&runs);
    Ok(PlanningBench { spec: spec.clone(), runs, cells, metadata: metadata(threads, started.elapsed().as_secs_f64()) })
}

pub fn aggregate_planning(runs: &[PlanningRun]) -> Vec<PlanningCell> {
    let mut keys: Vec<(String, EnvClass, Method)> = Vec::new();
    for r in runs {
        let k = (r.scenario.clone(), r.env_class, r.method);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(scenario, env_class, method)| {
            let group: Vec<&PlanningRun> =
                runs.iter().filter(|r| r.scenario == scenario && r.env_class == env_class && r.method == method).collect();
            let ok: Vec<f64> = group.iter().filter(|r| r.success).map(|r| r.plan_time_s).collect();
            let upp: Vec<f64> = group.iter().filter_map(|r| r.updates_per_projection).collect();
            let tpp: Vec<f64> = group.iter().filter_map(|r| r.time_per_projection_s).collect();
            let psr: Vec<f64> = group.iter().map(|r| r.projection_success_rate).collect();
            let (mean_plan_time_s, std_plan_time_s) = split(mean_std(&ok));
            let (mean_updates_per_projection, std_updates_per_projection) = split(mean_std(&upp));
            PlanningCell {
                rows: group[0].rows,
                scenario,
                env_class,
                method,
                runs: group.len(),
                successes: ok.len(),
                success_rate: 100.0 * ok.len() as f64 / group.len() as f64,
                mean_plan_time_s,
                std_plan_time_s,
                mean_projection_success_rate: mean_std(&psr).map_or(0.0, |p| p.0),
                mean_updates_per_projection,
                std_updates_per_projection,
                mean_time_per_projection_s: mean_std(&tpp).map(|p| p.0),
                audit_violations: group.iter().map(|r| r.audit_violations).sum(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Output

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum BenchResult {
    Projection(ProjectionBench),
    Planning(PlanningBench),
}

pub fn run(spec: &BenchSpec) -> Result<BenchResult, BenchError> {
    Ok(match spec.experiment {
        Experiment::ProjectionCompare => BenchResult::Projection(run_projection_benchmark(spec)?),
        Experiment::PlanningCompare => BenchResult::Planning(run_planning_benchmark(spec)?),
    })
}

pub const PROJECTION_TRIALS_CSV: &str = "projection_trials.csv";
pub const PROJECTION_CELLS_CSV: &str = "projection_cells.csv";
pub const PLANNING_RUNS_CSV: &str = "planning_runs.csv";
pub const PLANNING_CELLS_CSV: &str = "planning_cells.csv";
pub const SUMMARY_MD: &str = "summary.md";

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BenchError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| io_err(path, e))
}

/// Cells flattened for CSV: per-manifold residual columns instead of a list.
#[derive(Serialize)]
struct ProjectionCellRow<'a> {
    scenario: &'a str,
    manifolds: &'a str,
    rows: usize,
    method: Method,
    threshold_scale: f64,
    trials: usize,
    successes: usize,
    success_rate: f64,
    mean_time_s: Option<f64>,
    std_time_s: Option<f64>,
    mean_updates: Option<f64>,
    std_updates: Option<f64>,
    mean_residual_evals: Option<f64>,
    m1_mean: Option<f64>,
    m1_std: Option<f64>,
    m2_mean: Option<f64>,
    m2_std: Option<f64>,
    m3_mean: Option<f64>,
    m3_std: Option<f64>,
    m4_mean: Option<f64>,
    m4_std: Option<f64>,
    m5_mean: Option<f64>,
    m5_std: Option<f64>,
}

fn cell_row(c: &ProjectionCell) -> ProjectionCellRow<'_> {
    let get = |k: ManifoldKind| c.residuals.iter().find(|s| s.kind == k);
    let m = |k| get(k).map(|s| s.mean);
    let s = |k| get(k).map(|s| s.std);
    use ManifoldKind::*;
    ProjectionCellRow {
        scenario: &c.scenario,
        manifolds: &c.manifolds,
        rows: c.rows,
        method: c.method,
        threshold_scale: c.threshold_scale,
        trials: c.trials,
        successes: c.successes,
        success_rate: c.success_rate,
        mean_time_s: c.mean_time_s,
        std_time_s: c.std_time_s,
        mean_updates: c.mean_updates,
        std_updates: c.std_updates,
        mean_residual_evals: c.mean_residual_evals,
        m1_mean: m(StructureFixedDistance),
        m1_std: s(StructureFixedDistance),
        m2_mean: m(StructureFixedAngle),
        m2_std: s(StructureFixedAngle),
        m3_mean: m(TaskFixedOrient),
        m3_std: s(TaskFixedOrient),
        m4_mean: m(TaskSamePlane),
        m4_std: s(TaskSamePlane),
        m5_mean: m(RobotDiffDrive),
        m5_std: s(RobotDiffDrive),
    }
}

/// Writes CSVs, the markdown summary, residual plots and `metadata.json`.
/// Returns the files written.
pub fn write_outputs(result: &BenchResult, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<(), BenchError> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        written.push(p);
        Ok(())
    };
    match result {
        BenchResult::Projection(b) => {
            put(SUMMARY_MD, summarize_projection(&b.cells))?;
            put("metadata.json", serde_json::to_string_pretty(&b.metadata).expect("serializes") + "\n")?;
            put("spec.json", serde_json::to_string_pretty(&b.spec).expect("serializes") + "\n")?;
            for (i, (label, trace)) in b.traces.iter().enumerate() {
                put(&format!("residual_{i:02}.svg"), residual_plot_svg(label, &[(label.as_str(), trace.as_slice())]))?;
            }
            let p = dir.join(PROJECTION_TRIALS_CSV);
            write_csv(&p, &b.trials)?;
            written.push(p);
            let p = dir.join(PROJECTION_CELLS_CSV);
            let rows: Vec<_> = b.cells.iter().map(cell_row).collect();
            write_csv(&p, &rows)?;
            written.push(p);
        }
        BenchResult::Planning(b) => {
            put(SUMMARY_MD, summarize_planning(&b.cells))?;
            put("metadata.json", serde_json::to_string_pretty(&b.metadata).expect("serializes") + "\n")?;
            put("spec.json", serde_json::to_string_pretty(&b.spec).expect("serializes") + "\n")?;
            let p = dir.join(PLANNING_RUNS_CSV);
            write_csv(&p, &b.runs)?;
            written.push(p);
            let p = dir.join(PLANNING_CELLS_CSV);
            write_csv(&p, &b.cells)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn fmt_pm(mean: Option<f64>, std: Option<f64>, scale: f64, prec: usize) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{:.prec$} ± {:.prec$}", m * scale, s * scale),
        _ => "--".into(),
    }
}

fn fmt_rate(successes: usize, rate: f64) -> String {
    if successes == 0 {
        "--".into()
    } else {
        format!("{rate:.1}")
    }
}

/// Markdown tables laid out like the projection comparison: one row per
/// (scenario, manifold set, threshold scale), success rate and time per
/// method, then update counts and final residuals.
pub fn summarize_projection(cells: &[ProjectionCell]) -> String {
    if cells.is_empty() {
        return String::new();
    }
    let mut methods: Vec<Method> = Vec::new();
    let mut rows: Vec<(String, String, usize, f64)> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
        let k = (c.scenario.clone(), c.manifolds.clone(), c.rows, c.threshold_scale);
        if !rows.contains(&k) {
            rows.push(k);
        }
    }
    let find = |r: &(String, String, usize, f64), m: Method| {
        cells.iter().find(|c| c.scenario == r.0 && c.manifolds == r.1 && c.threshold_scale == r.3 && c.method == m)
    };
    let mut out = String::new();
    let header = |out: &mut String, title: &str| {
        let _ = writeln!(out, "## {title}\n");
        let _ = write!(out, "| Scenario | Manifolds | l | Scale |");
        for m in &methods {
            let _ = write!(out, " {m} |");
        }
        let _ = write!(out, "\n|---|---|---|---|");
        for _ in &methods {
            let _ = write!(out, "---|");
        }
        out.push('\n');
    };
    type CellFmt = fn(&ProjectionCell) -> String;
    let tables: [(&str, CellFmt); 4] = [
        ("Success rate (%)", |c| fmt_rate(c.successes, c.success_rate)),
        ("Time per projection (ms, converged)", |c| fmt_pm(c.mean_time_s, c.std_time_s, 1e3, 3)),
        ("Single-row updates (converged)", |c| fmt_pm(c.mean_updates, c.std_updates, 1.0, 1)),
        ("Mean |residual| per manifold (converged)", |c| {
            if c.residuals.is_empty() {
                "--".into()
            } else {
                c.residuals.iter().map(|s| format!("{} {:.4} ± {:.4}", s.kind, s.mean, s.std)).collect::<Vec<_>>().join("<br>")
            }
        }),
    ];
    for (title, f) in tables {
        header(&mut out, title);
        for r in &rows {
            let _ = write!(out, "| {} | {} | {} | {} |", r.0, r.1, r.2, r.3);
            for &m in &methods {
                let _ = write!(out, " {} |", find(r, m).map_or("--".into(), f));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Markdown tables laid out like the planning comparison: one row per
/// (scenario, clutter class), success and timing per method.
pub fn summarize_planning(cells: &[PlanningCell]) -> String {
    if cells.is_empty() {
        return String::new();
    }
    let mut methods: Vec<Method> = Vec::new();
    let mut rows: Vec<(String, usize, EnvClass)> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
        let k = (c.scenario.clone(), c.rows, c.env_class);
        if !rows.contains(&k) {
            rows.push(k);
        }
    }
    let find = |r: &(String, usize, EnvClass), m: Method| {
        cells.iter().find(|c| c.scenario == r.0 && c.env_class == r.2 && c.method == m)
    };
    type CellFmt = fn(&PlanningCell) -> String;
    let tables: [(&str, CellFmt); 5] = [
        ("Plan success (%)", |c| fmt_rate(c.successes, c.success_rate)),
        ("Plan time (s, successful plans)", |c| fmt_pm(c.mean_plan_time_s, c.std_plan_time_s, 1.0, 2)),
        ("Updates per projection", |c| fmt_pm(c.mean_updates_per_projection, c.std_updates_per_projection, 1.0, 1)),
        ("Time per projection (ms)", |c| {
            c.mean_time_per_projection_s.map_or("--".into(), |t| format!("{:.4}", t * 1e3))
        }),
        ("Audit violations", |c| c.audit_violations.to_string()),
    ];
    let mut out = String::new();
    for (title, f) in tables {
        let _ = writeln!(out, "## {title}\n");
        let _ = write!(out, "| Structure | l | Complexity |");
        for m in &methods {
            let _ = write!(out, " {m} |");
        }
        let _ = write!(out, "\n|---|---|---|");
        for _ in &methods {
            let _ = write!(out, "---|");
        }
        out.push('\n');
        for r in &rows {
            let _ = write!(out, "| {} | {} | {} |", r.0, r.1, r.2.label());
            for &m in &methods {
                let _ = write!(out, " {} |", find(r, m).map_or("--".into(), f));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Rebuilds the summary from whichever trials CSV exists in `dir`.
pub fn summarize_dir(dir: &Path) -> Result<String, BenchError> {
    let proj = dir.join(PROJECTION_TRIALS_CSV);
    let plan = dir.join(PLANNING_RUNS_CSV);
    let mut out = String::new();
    if proj.exists() {
        let trials: Vec<ProjectionTrial> = read_csv(&proj)?;
        out.push_str(&summarize_projection(&aggregate_projection(&trials)));
    }
    if plan.exists() {
        let runs: Vec<PlanningRun> = read_csv(&plan)?;
        out.push_str(&summarize_planning(&aggregate_planning(&runs)));
    }
    Ok(out)
}

/// Residual norm against iteration on a log scale, one polyline per series.
pub fn residual_plot_svg(title: &str, series: &[(&str, &[(usize, f64)])]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 40.0);
    let mut svg = Svg::new(w, h);
    svg.rect(0.0, 0.0, w, h, "fill:#ffffff;stroke:none");
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.1 > 0.0);
    let max_step = pts.clone().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let lo = pts.clone().map(|p| p.1.log10()).fold(f64::INFINITY, f64::min);
    let hi = pts.map(|p| p.1.log10()).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo.floor(), hi.ceil().max(lo.floor() + 1.0)) } else { (-1.0, 0.0) };
    let px = |s: usize| left + (w - left - right) * s as f64 / max_step;
    let py = |v: f64| top + (h - top - bottom) * (hi - v.log10()) / (hi - lo);
    let axis = "stroke:#000000;stroke-width:1";
    svg.line((left, h - bottom), (w - right, h - bottom), axis);
    svg.line((left, top), (left, h - bottom), axis);
    let mut d = lo as i32;
    while d as f64 <= hi {
        let y = py(10f64.powi(d));
        svg.line((left - 4.0, y), (left, y), axis);
        svg.text(8.0, y + 4.0, 11.0, &format!("1e{d}"));
        d += 1;
    }
    svg.text(w / 2.0 - 30.0, h - 10.0, 12.0, "iteration");
    svg.text(left, 18.0, 13.0, title);
    for (i, (_, s)) in series.iter().enumerate() {
        let line: Vec<_> = s.iter().filter(|p| p.1 > 0.0).map(|p| (px(p.0), py(p.1))).collect();
        svg.polyline(&line, &format!("stroke:{};stroke-width:1.5", PALETTE[i % PALETTE.len()]));
    }
    svg.finish()
}

impl From<PlanError> for BenchError {
    fn from(e: PlanError) -> Self {
        BenchError::Spec(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_small() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[2.0]), Some((2.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((m - 2.5).abs() < 1e-15);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn manifold_set_labels() {
        use ManifoldKind::*;
        assert_eq!(manifold_set_label(&[StructureFixedDistance, TaskFixedOrient]), "M1+M3");
        assert_eq!(parse_manifold_set("M1+M3").unwrap(), vec![StructureFixedDistance, TaskFixedOrient]);
        assert_eq!(parse_manifold_set("none").unwrap(), vec![]);
        assert!(parse_manifold_set("M9").is_err());
    }

    #[test]
    fn empty_manifold_set_is_vacuous() {
        let spec = BenchSpec {
            trials: 1,
            methods: vec![Method::Cnkz],
            manifold_sets: vec![vec![]],
            ..BenchSpec::projection()
        };
        let b = run_projection_benchmark(&spec).unwrap();
        assert_eq!(b.cells.len(), 1);
        assert_eq!(b.cells[0].success_rate, 100.0);
        assert_eq!(b.cells[0].mean_time_s, Some(0.0));
    }

    #[test]
    fn empty_summary() {
        assert_eq!(summarize_projection(&[]), "");
        assert_eq!(summarize_planning(&[]), "");
    }

    #[test]
    fn spec_validation() {
        assert!(BenchSpec { trials: 0, ..BenchSpec::projection() }.validate().is_err());
        assert!(BenchSpec { scenarios: vec!["nope".into()], ..BenchSpec::projection() }.validate().is_err());
        assert!(BenchSpec::planning().validate().is_ok());
    }
}
