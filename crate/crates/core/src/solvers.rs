//! Projection of a team configuration onto the intersection of manifolds.
//!
//! Four methods share one interface:
//! * `Cnkz`: cyclic Kaczmarz with per-manifold thresholds; satisfied rows are skipped.
//! * `Nkz`: the same loop with one global threshold and no skipping.
//! * `Nr`: Newton-Raphson on the full Jacobian through an SVD pseudo-inverse.
//! * `Cim`: Cimmino, averaging the single-row steps of all unsatisfied rows.
//!
//! The Kaczmarz loops visit rows cyclically, recompute the full residual after
//! every update and keep the best-so-far iterate by residual norm; the stored
//! best residual is only replaced when a step lowers the norm. Row skipping and
//! step lengths use the residual at the current iterate unless
//! `stale_residual` is set, in which case they use the stored best residual.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintError, ConstraintSystem, ManifoldKind, Residual, SingularRow};
use crate::kinematics::SystemConfiguration;

/// Singular-value cutoff for the Newton pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-10;
/// Residual norm above which Newton iterations are declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Row-wise view of a residual map `F: R^m -> R^l` with per-row thresholds.
pub trait RowSystem {
    fn dim(&self) -> usize;
    fn total_rows(&self) -> usize;
    fn thresholds(&self) -> &[f64];
    fn eval_into(&self, q: &[f64], out: &mut [f64]);
    /// Gradient of row `row`; `Err` for a singular gradient.
    fn gradient_into(&self, q: &[f64], row: usize, out: &mut [f64]) -> Result<(), SingularRow>;
    /// Rows whose value can change when row `row` is updated.
    fn coupled_rows(&self, row: usize) -> Vec<usize> {
        let _ = row;
        (0..self.total_rows()).collect()
    }
    fn eval_rows_into(&self, q: &[f64], rows: &[usize], out: &mut [f64]) {
        let mut full = vec![0.0; self.total_rows()];
        self.eval_into(q, &mut full);
        for &r in rows {
            out[r] = full[r];
        }
    }
    fn eval(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total_rows()];
        self.eval_into(q, &mut out);
        out
    }
}

impl RowSystem for ConstraintSystem {
    fn dim(&self) -> usize {
        ConstraintSystem::dim(self)
    }
    fn total_rows(&self) -> usize {
        ConstraintSystem::total_rows(self)
    }
    fn thresholds(&self) -> &[f64] {
        self.threshold_vector()
    }
    fn eval_into(&self, q: &[f64], out: &mut [f64]) {
        ConstraintSystem::eval_into(self, q, out)
    }
    fn gradient_into(&self, q: &[f64], row: usize, out: &mut [f64]) -> Result<(), SingularRow> {
        let kin = self.kinematics(q);
        self.jacobian_row_into(q, &kin, row, out)
    }
    fn coupled_rows(&self, row: usize) -> Vec<usize> {
        let mut rows: Vec<usize> =
            self.row(row).robots().into_iter().flat_map(|r| self.rows_touching(r).iter().copied()).collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }
    fn eval_rows_into(&self, q: &[f64], rows: &[usize], out: &mut [f64]) {
        ConstraintSystem::eval_rows_into(self, q, rows, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cnkz,
    Nkz,
    Nr,
    Cim,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Nr, Method::Cim, Method::Nkz, Method::Cnkz];

    pub fn label(self) -> &'static str {
        match self {
            Method::Cnkz => "cNKZ",
            Method::Nkz => "NKZ",
            Method::Nr => "NR",
            Method::Cim => "CIM",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cnkz" => Ok(Method::Cnkz),
            "nkz" => Ok(Method::Nkz),
            "nr" => Ok(Method::Nr),
            "cim" => Ok(Method::Cim),
            other => Err(format!("unknown method `{other}` (expected cnkz, nkz, nr or cim)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub method: Method,
    /// Budget in cycles: the Kaczmarz loops get `max_steps * l` row visits,
    /// NR and CIM get `max_steps` whole-system iterations.
    pub max_steps: usize,
    /// Threshold for NKZ/NR/CIM; `None` uses the smallest manifold threshold.
    pub global_threshold: Option<f64>,
    pub nr_step_scale: f64,
    pub cim_relaxation: f64,
    pub rng_seed: u64,
    /// Visit rows in a fresh random permutation every cycle.
    pub randomized_order: bool,
    /// Refresh only rows that share a robot with the updated row. The iterates
    /// are identical to the full recomputation; only the cost differs.
    pub fast_mode: bool,
    /// Drive the Kaczmarz loops by the last accepted residual instead of the
    /// residual at the current iterate. Off by default: with it on, a single
    /// rejected step leaves the remaining rows stepping with stale values and
    /// the iterate rarely recovers.
    pub stale_residual: bool,
    pub record_trace: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            method: Method::Cnkz,
            max_steps: 2000,
            global_threshold: None,
            nr_step_scale: 1.0,
            cim_relaxation: 1.0,
            rng_seed: 0,
            randomized_order: false,
            fast_mode: false,
            stale_residual: false,
            record_trace: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("nr_step_scale must lie in (0, 1], got {0}")]
    StepScale(f64),
    #[error("cim_relaxation must lie in (0, 2), got {0}")]
    Relaxation(f64),
    #[error("global_threshold must be non-negative, got {0}")]
    Threshold(f64),
}

impl SolverParams {
    pub fn with_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.nr_step_scale > 0.0 && self.nr_step_scale <= 1.0) {
            return Err(ParamError::StepScale(self.nr_step_scale));
        }
        if !(self.cim_relaxation > 0.0 && self.cim_relaxation < 2.0) {
            return Err(ParamError::Relaxation(self.cim_relaxation));
        }
        if let Some(t) = self.global_threshold {
            if !(t >= 0.0) {
                return Err(ParamError::Threshold(t));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("start configuration has {got} DoFs per robot, system expects {expected}")]
    Layout { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    BudgetExhausted,
    SingularStall,
}

/// Residual of the accepted iterate after one loop step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Row whose update was attempted, `None` for skips and whole-system methods.
    pub row: Option<usize>,
    pub norm: f64,
    pub accepted: bool,
    pub weighted: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldResidual {
    pub kind: ManifoldKind,
    pub rows: usize,
    pub threshold: f64,
    pub max_abs: f64,
    pub mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub method: Method,
    pub status: Status,
    pub result: SystemConfiguration,
    /// Loop iterations consumed.
    pub steps_used: usize,
    /// Configuration updates applied.
    pub updates: usize,
    /// Full residual evaluations after the initial one.
    pub residual_evals: usize,
    /// Newton iterate exceeded the divergence norm.
    pub diverged: bool,
    pub initial_norm: f64,
    pub final_norm: f64,
    pub final_residual: Residual,
    pub per_manifold: Vec<ManifoldResidual>,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceStep>,
}

impl ProjectionReport {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    /// Copy with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self { wall_time_s: 0.0, ..self.clone() }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Runs the method selected in `params`.
pub fn project(
    sys: &ConstraintSystem,
    q0: &SystemConfiguration,
    params: &SolverParams,
) -> Result<ProjectionReport, SolveError> {
    params.validate()?;
    if q0.dofs_per_robot() != sys.dofs_per_robot() {
        return Err(SolveError::Layout { got: q0.dofs_per_robot(), expected: sys.dofs_per_robot() });
    }
    sys.check_dim(q0.as_slice())?;
    let started = Instant::now();
    let raw = solve_rows(sys, q0.as_slice(), params)?;
    let wall_time_s = started.elapsed().as_secs_f64();
    let result = q0.with_values(raw.q);
    let final_residual = sys.eval_residual(&result)?;
    let per_manifold = sys
        .manifolds()
        .iter()
        .map(|m| {
            let vals = &final_residual.unweighted[m.rows.clone()];
            let max_abs = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mean_abs = if vals.is_empty() {
                0.0
            } else {
                vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64
            };
            ManifoldResidual { kind: m.kind, rows: vals.len(), threshold: m.threshold, max_abs, mean_abs }
        })
        .collect();
    Ok(ProjectionReport {
        method: params.method,
        status: raw.status,
        result,
        steps_used: raw.steps,
        updates: raw.updates,
        residual_evals: raw.evals,
        diverged: raw.diverged,
        initial_norm: raw.initial_norm,
        final_norm: norm(&final_residual.weighted),
        final_residual,
        per_manifold,
        wall_time_s,
        trace: raw.trace,
    })
}

pub fn project_cnkz(
    sys: &ConstraintSystem,
    q0: &SystemConfiguration,
    params: &SolverParams,
) -> Result<ProjectionReport, SolveError> {
    project(sys, q0, &SolverParams { method: Method::Cnkz, ..params.clone() })
}

pub fn project_nkz(
    sys: &ConstraintSystem,
    q0: &SystemConfiguration,
    params: &SolverParams,
) -> Result<ProjectionReport, SolveError> {
    project(sys, q0, &SolverParams { method: Method::Nkz, ..params.clone() })
}

pub fn project_nr(
    sys: &ConstraintSystem,
    q0: &SystemConfiguration,
    params: &SolverParams,
) -> Result<ProjectionReport, SolveError> {
    project(sys, q0, &SolverParams { method: Method::Nr, ..params.clone() })
}

pub fn project_cim(
    sys: &ConstraintSystem,
    q0: &SystemConfiguration,
    params: &SolverParams,
) -> Result<ProjectionReport, SolveError> {
    project(sys, q0, &SolverParams { method: Method::Cim, ..params.clone() })
}

/// Outcome of a solve on a bare [`RowSystem`].
#[derive(Clone, Debug, PartialEq)]
pub struct RowSolve {
    pub status: Status,
    /// Best-so-far iterate.
    pub q: Vec<f64>,
    pub steps: usize,
    pub updates: usize,
    pub evals: usize,
    pub diverged: bool,
    pub initial_norm: f64,
    pub trace: Vec<TraceStep>,
}

/// Runs `params.method` on any row system.
pub fn solve_rows<S: RowSystem + ?Sized>(
    sys: &S,
    q0: &[f64],
    params: &SolverParams,
) -> Result<RowSolve, ParamError> {
    params.validate()?;
    Ok(match params.method {
        Method::Cnkz => kaczmarz(sys, q0, params, true),
        Method::Nkz => kaczmarz(sys, q0, params, false),
        Method::Nr => newton(sys, q0, params),
        Method::Cim => cimmino(sys, q0, params),
    })
}

fn min_threshold(eps: &[f64]) -> f64 {
    eps.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Single Kaczmarz step `q <- q - r / |g|^2 * g`. Returns `false` for a
/// singular gradient.
pub fn kaczmarz_step(q: &mut [f64], r: f64, g: &[f64]) -> bool {
    let g2: f64 = g.iter().map(|v| v * v).sum();
    if g2.sqrt() < crate::constraints::SINGULAR_EPS {
        return false;
    }
    let s = r / g2;
    for (qi, gi) in q.iter_mut().zip(g) {
        *qi -= s * gi;
    }
    true
}

fn kaczmarz<S: RowSystem + ?Sized>(sys: &S, q0: &[f64], params: &SolverParams, per_manifold: bool) -> RowSolve {
    let l = sys.total_rows();
    let m = sys.dim();
    let eps = sys.thresholds();
    let global = params.global_threshold.unwrap_or_else(|| min_threshold(eps));
    let row_ok = |r: &[f64], i: usize| {
        if per_manifold {
            r[i].abs() <= eps[i]
        } else {
            r[i].abs() <= global
        }
    };
    let all_ok = |r: &[f64]| {
        if per_manifold {
            r.iter().zip(eps).all(|(v, e)| v.abs() <= *e)
        } else {
            inf_norm(r) <= global
        }
    };

    let mut q = q0.to_vec();
    let mut best = q.clone();
    let mut r = sys.eval(&q);
    let mut r_norm = norm(&r);
    let initial_norm = r_norm;
    // Residual at the current iterate, which may differ from `r` after a rejected step.
    let mut r_cur = r.clone();
    let mut r_new = vec![0.0; l];
    let mut g = vec![0.0; m];
    let mut touched = vec![false; l];
    let mut touched_rows = Vec::with_capacity(l);

    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut order: Vec<usize> = (0..l).collect();
    let mut trace = Vec::new();
    let (mut step, mut updates, mut evals) = (0usize, 0usize, 0usize);
    let mut cycle_unsatisfied = 0usize;
    let mut cycle_singular = 0usize;
    let mut status = Status::BudgetExhausted;

    if params.record_trace {
        trace.push(TraceStep { step: 0, row: None, norm: r_norm, accepted: true, weighted: r.clone() });
    }

    loop {
        if all_ok(&r) {
            status = Status::Converged;
            break;
        }
        if !params.stale_residual && all_ok(&r_cur) {
            best.copy_from_slice(&q);
            r.copy_from_slice(&r_cur);
            status = Status::Converged;
            break;
        }
        if step >= params.max_steps.saturating_mul(l) || l == 0 {
            break;
        }
        let pos = step % l;
        if pos == 0 && params.randomized_order {
            order.shuffle(&mut rng);
        }
        let i = order[pos];
        let mut attempted = None;
        let mut accepted = false;
        let drive = if params.stale_residual { &r } else { &r_cur };
        let update = !per_manifold || !row_ok(drive, i);
        if update {
            let singular = sys.gradient_into(&q, i, &mut g).is_err();
            if !row_ok(drive, i) {
                cycle_unsatisfied += 1;
                if singular {
                    cycle_singular += 1;
                }
            }
            let ri = drive[i];
            if !singular && kaczmarz_step(&mut q, ri, &g) {
                attempted = Some(i);
                updates += 1;
                evals += 1;
                if params.fast_mode {
                    touched_rows.clear();
                    for ri in sys.coupled_rows(i) {
                        if !touched[ri] {
                            touched[ri] = true;
                            touched_rows.push(ri);
                        }
                    }
                    sys.eval_rows_into(&q, &touched_rows, &mut r_cur);
                    for &ri in &touched_rows {
                        touched[ri] = false;
                    }
                    r_new.copy_from_slice(&r_cur);
                } else {
                    sys.eval_into(&q, &mut r_new);
                    r_cur.copy_from_slice(&r_new);
                }
                let new_norm = norm(&r_new);
                if new_norm < r_norm {
                    best.copy_from_slice(&q);
                    r.copy_from_slice(&r_new);
                    r_norm = new_norm;
                    accepted = true;
                }
            }
        }
        step += 1;
        if params.record_trace {
            trace.push(TraceStep { step, row: attempted, norm: r_norm, accepted, weighted: r.clone() });
        }
        if step % l == 0 {
            if cycle_unsatisfied > 0 && cycle_singular == cycle_unsatisfied {
                status = Status::SingularStall;
                break;
            }
            cycle_unsatisfied = 0;
            cycle_singular = 0;
        }
    }
    RowSolve { status, q: best, steps: step, updates, evals, diverged: false, initial_norm, trace }
}

fn newton<S: RowSystem + ?Sized>(sys: &S, q0: &[f64], params: &SolverParams) -> RowSolve {
    let global = params.global_threshold.unwrap_or_else(|| min_threshold(sys.thresholds()));
    let (l, m) = (sys.total_rows(), sys.dim());
    let mut g = vec![0.0; m];
    let mut q = DVector::from_column_slice(q0);
    let mut f = sys.eval(q.as_slice());
    let initial_norm = norm(&f);
    let mut best = q.clone();
    let mut best_norm = initial_norm;
    let mut trace = Vec::new();
    if params.record_trace {
        trace.push(TraceStep { step: 0, row: None, norm: initial_norm, accepted: true, weighted: f.clone() });
    }
    let (mut steps, mut evals) = (0usize, 0usize);
    let mut diverged = false;
    let mut status = Status::BudgetExhausted;
    loop {
        if inf_norm(&f) <= global {
            status = Status::Converged;
            break;
        }
        if norm(&f) > DIVERGENCE_NORM || !f.iter().all(|v| v.is_finite()) {
            diverged = true;
            break;
        }
        if steps >= params.max_steps {
            break;
        }
        let mut jac = DMatrix::zeros(l, m);
        for r in 0..l {
            if sys.gradient_into(q.as_slice(), r, &mut g).is_ok() {
                jac.row_mut(r).copy_from_slice(&g);
            }
        }
        if jac.iter().all(|v| *v == 0.0) {
            status = Status::SingularStall;
            break;
        }
        let rhs = DVector::from_column_slice(&f);
        let dx = match jac.svd(true, true).solve(&rhs, PINV_CUTOFF) {
            Ok(dx) => dx,
            Err(_) => {
                status = Status::SingularStall;
                break;
            }
        };
        q -= dx * params.nr_step_scale;
        steps += 1;
        evals += 1;
        f = sys.eval(q.as_slice());
        let n = norm(&f);
        let accepted = n < best_norm;
        if accepted {
            best.copy_from(&q);
            best_norm = n;
        }
        if params.record_trace {
            trace.push(TraceStep { step: steps, row: None, norm: best_norm, accepted, weighted: f.clone() });
        }
    }
    // The last iterate is only returned if it is also the best one.
    let out = if status == Status::Converged { q } else { best };
    RowSolve { status, q: out.as_slice().to_vec(), steps, updates: steps, evals, diverged, initial_norm, trace }
}

fn cimmino<S: RowSystem + ?Sized>(sys: &S, q0: &[f64], params: &SolverParams) -> RowSolve {
    let global = params.global_threshold.unwrap_or_else(|| min_threshold(sys.thresholds()));
    let m = sys.dim();
    let mut q = q0.to_vec();
    let mut f = sys.eval(&q);
    let initial_norm = norm(&f);
    let mut best = q.clone();
    let mut best_norm = initial_norm;
    let mut g = vec![0.0; m];
    let mut step_sum = vec![0.0; m];
    let mut trace = Vec::new();
    if params.record_trace {
        trace.push(TraceStep { step: 0, row: None, norm: initial_norm, accepted: true, weighted: f.clone() });
    }
    let (mut steps, mut evals) = (0usize, 0usize);
    let mut status = Status::BudgetExhausted;
    loop {
        if inf_norm(&f) <= global {
            status = Status::Converged;
            break;
        }
        if steps >= params.max_steps {
            break;
        }
        step_sum.iter_mut().for_each(|v| *v = 0.0);
        let mut used = 0usize;
        for (i, fi) in f.iter().enumerate() {
            if fi.abs() <= global || sys.gradient_into(&q, i, &mut g).is_err() {
                continue;
            }
            let g2: f64 = g.iter().map(|v| v * v).sum();
            let s = fi / g2;
            for (acc, gi) in step_sum.iter_mut().zip(&g) {
                *acc -= s * gi;
            }
            used += 1;
        }
        if used == 0 {
            status = Status::SingularStall;
            break;
        }
        let scale = params.cim_relaxation / used as f64;
        for (qi, d) in q.iter_mut().zip(&step_sum) {
            *qi += scale * d;
        }
        steps += 1;
        evals += 1;
        f = sys.eval(&q);
        let n = norm(&f);
        let accepted = n < best_norm;
        if accepted {
            best.copy_from_slice(&q);
            best_norm = n;
        }
        if params.record_trace {
            trace.push(TraceStep { step: steps, row: None, norm: best_norm, accepted, weighted: f.clone() });
        }
    }
    let out = if status == Status::Converged { q } else { best };
    RowSolve { status, q: out, steps, updates: steps, evals, diverged: false, initial_norm, trace }
}

pub const TRACE_HEADER: [&str; 7] =
    ["step", "row", "manifold", "unweighted_residual", "weighted_residual", "norm", "accepted"];

/// Writes the recorded trace as CSV, one line per residual row per step.
/// Requires the report to have been produced with `record_trace`.
pub fn residual_trace_export<W: Write>(
    report: &ProjectionReport,
    sys: &ConstraintSystem,
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    let weights = sys.weights();
    for t in &report.trace {
        for (row, &wr) in t.weighted.iter().enumerate() {
            let (mi, _) = sys.row_map(row);
            w.write_record([
                t.step.to_string(),
                row.to_string(),
                sys.manifolds()[mi].kind.label().to_string(),
                format!("{:e}", wr / weights[row]),
                format!("{wr:e}"),
                format!("{:e}", t.norm),
                t.accepted.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Dense matrix of the current Jacobian, exposed for diagnostics.
pub fn jacobian_matrix(sys: &ConstraintSystem, q: &SystemConfiguration) -> DMatrix<f64> {
    sys.jacobian(q.as_slice()).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{ManifoldKind, Structure};
    use crate::kinematics::{RobotConfiguration, RobotModel};
    use nalgebra::Vector3;

    fn straight3() -> Structure {
        let pts = (0..3).map(|i| Vector3::new(0.5 * i as f64, 0.0, 0.0)).collect();
        Structure::new("s", pts, vec![]).unwrap()
    }

    fn team(offsets: [[f64; 3]; 3]) -> SystemConfiguration {
        let robots: Vec<_> = offsets
            .iter()
            .enumerate()
            .map(|(i, o)| RobotConfiguration::new(0.5 * i as f64 + o[0], o[1], -0.5 + o[2], 0.1 * i as f64, [0.1, -0.2]))
            .collect();
        SystemConfiguration::from_robots(&robots).unwrap()
    }

    #[test]
    fn satisfied_start_is_untouched() {
        let m = RobotModel::default();
        let s = straight3();
        let sys = ConstraintSystem::with_defaults(&m, &s, &[ManifoldKind::StructureFixedDistance]).unwrap();
        let q0 = team([[0.0; 3]; 3]);
        for method in Method::ALL {
            let rep = project(&sys, &q0, &SolverParams::with_method(method)).unwrap();
            assert_eq!(rep.status, Status::Converged, "{method}");
            assert_eq!(rep.updates, 0);
            assert_eq!(rep.result, q0);
        }
    }

    #[test]
    fn zero_budget_exhausts() {
        let m = RobotModel::default();
        let s = straight3();
        let sys = ConstraintSystem::with_defaults(&m, &s, &[ManifoldKind::StructureFixedDistance]).unwrap();
        let q0 = team([[0.0; 3], [0.2, 0.0, 0.0], [0.0; 3]]);
        let p = SolverParams { max_steps: 0, ..SolverParams::default() };
        let rep = project(&sys, &q0, &p).unwrap();
        assert_eq!(rep.status, Status::BudgetExhausted);
        assert_eq!(rep.steps_used, 0);
    }

    #[test]
    fn cnkz_converges_on_distance_rows() {
        let m = RobotModel::default();
        let s = straight3();
        let sys = ConstraintSystem::with_defaults(
            &m,
            &s,
            &[ManifoldKind::StructureFixedDistance, ManifoldKind::TaskFixedOrient],
        )
        .unwrap();
        let q0 = team([[0.1, 0.05, 0.0], [0.2, -0.1, 0.1], [-0.1, 0.2, 0.0]]);
        let rep = project(&sys, &q0, &SolverParams::default()).unwrap();
        assert_eq!(rep.status, Status::Converged);
        assert!(sys.satisfied(&rep.final_residual.weighted));
        assert!(rep.final_norm <= rep.initial_norm);
    }

    #[test]
    fn fast_mode_matches_full_recompute() {
        let m = RobotModel::default();
        let s = straight3();
        let kinds = [
            ManifoldKind::StructureFixedDistance,
            ManifoldKind::StructureFixedAngle,
            ManifoldKind::TaskFixedOrient,
            ManifoldKind::TaskSamePlane,
        ];
        let sys = ConstraintSystem::with_defaults(&m, &s, &kinds).unwrap();
        let q0 = team([[0.3, 0.05, 0.1], [0.2, -0.4, 0.1], [-0.1, 0.2, -0.3]]);
        for method in [Method::Cnkz, Method::Nkz] {
            let full = project(&sys, &q0, &SolverParams::with_method(method)).unwrap();
            let fast =
                project(&sys, &q0, &SolverParams { fast_mode: true, ..SolverParams::with_method(method) }).unwrap();
            assert_eq!(full.without_timing(), fast.without_timing());
        }
    }

    #[test]
    fn method_parse() {
        assert_eq!("CNKZ".parse::<Method>().unwrap(), Method::Cnkz);
        assert!("gd".parse::<Method>().is_err());
    }

    #[test]
    fn params_validation() {
        let bad = SolverParams { nr_step_scale: 0.0, ..SolverParams::default() };
        assert_eq!(bad.validate(), Err(ParamError::StepScale(0.0)));
        let bad = SolverParams { cim_relaxation: 2.0, ..SolverParams::default() };
        assert_eq!(bad.validate(), Err(ParamError::Relaxation(2.0)));
    }
}
