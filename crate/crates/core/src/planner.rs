//! RRT over the team configuration space with projection-based steering.
//!
//! Each extension steps from the nearest tree node toward a sample by at most
//! `steer_step`, projects the result onto the constraint manifolds and keeps
//! it only if the projection converged, every DoF is inside its limits, the
//! carried structure can be fitted to the end-effectors, and both the node and
//! the edge from its parent are collision-free. Constraints are enforced at
//! nodes only; interior edge points are checked for collision but not
//! projected. An accepted edge can therefore be longer than `steer_step` by
//! the projection displacement.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintError, ConstraintSystem, ManifoldKind};
use crate::geometry::{
    capsule_aabb_intersects, capsule_obb_intersects, fit_rigid, obb_intersects, Aabb, Capsule, Obb, RigidFit,
};
use crate::kinematics::{
    arm_points, wrap_angle, SystemConfiguration, ARM_1, ARM_2, CORE_DOFS, VEL_X, VEL_Y, X, YAW, Z,
};
use crate::scenarios::{Scenario, StructurePose};
use crate::solvers::{project, SolveError, SolverParams, Status};
use crate::svg::{Svg, PALETTE};

pub const PATH_SCHEMA_VERSION: u32 = 1;
/// Radius of the capsules around arm links, meters.
pub const LINK_RADIUS: f64 = 0.02;

const W_POS: f64 = 1.0;
const W_YAW: f64 = 0.5;
const W_ARM: f64 = 0.2;
const W_VEL: f64 = 0.1;

/// Weighted Euclidean distance between flat team configurations: positions
/// weight 1, wrapped yaw 0.5, arm angles 0.2, velocities 0.1.
pub fn configuration_metric(a: &[f64], b: &[f64], dofs_per_robot: usize) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0;
    for (ba, bb) in a.chunks_exact(dofs_per_robot).zip(b.chunks_exact(dofs_per_robot)) {
        for d in X..=Z {
            let v = W_POS * (ba[d] - bb[d]);
            sum += v * v;
        }
        let y = W_YAW * wrap_angle(ba[YAW] - bb[YAW]);
        sum += y * y;
        for d in [ARM_1, ARM_2] {
            let v = W_ARM * (ba[d] - bb[d]);
            sum += v * v;
        }
        if dofs_per_robot > CORE_DOFS {
            for d in [VEL_X, VEL_Y] {
                let v = W_VEL * (ba[d] - bb[d]);
                sum += v * v;
            }
        }
    }
    sum.sqrt()
}

/// Point at fraction `t` from `a` to `b`, yaw along the shorter arc.
pub fn interpolate(a: &[f64], b: &[f64], t: f64, dofs_per_robot: usize) -> Vec<f64> {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(k, (x, y))| {
            if k % dofs_per_robot == YAW {
                wrap_angle(x + t * wrap_angle(y - x))
            } else {
                x + t * (y - x)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Body {
    Base(usize),
    Link { robot: usize, link: usize },
    Structure(usize),
    Obstacle(usize),
    Bounds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub a: Body,
    pub b: Body,
}

/// Collision bodies of a team configuration.
#[derive(Clone, Debug)]
pub struct TeamGeometry {
    pub bases: Vec<Obb>,
    pub links: Vec<[Capsule; 2]>,
    pub structure: Vec<Obb>,
    pub fit: Option<RigidFit>,
}

impl TeamGeometry {
    /// Box enclosing every body.
    pub fn bounds(&self) -> Aabb {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        let boxes = self
            .bases
            .iter()
            .chain(&self.structure)
            .map(Obb::bounds)
            .chain(self.links.iter().flatten().map(Capsule::bounds));
        for bb in boxes {
            lo = lo.inf(&bb.min);
            hi = hi.sup(&bb.max);
        }
        Aabb::new(lo, hi)
    }
}

/// Rigid fit of the structure's contact points onto the end-effectors.
pub fn structure_fit(scenario: &Scenario, q: &[f64]) -> RigidFit {
    let dofs = scenario.dofs_per_robot();
    let ee: Vec<Vector3<f64>> =
        q.chunks_exact(dofs).map(|b| arm_points(&scenario.robot_model, b)[2]).collect();
    fit_rigid(&scenario.structure.contact_points, &ee)
}

pub fn team_geometry(scenario: &Scenario, q: &[f64], with_structure: bool) -> TeamGeometry {
    let model = &scenario.robot_model;
    let dofs = scenario.dofs_per_robot();
    let mut bases = Vec::with_capacity(scenario.team_size);
    let mut links = Vec::with_capacity(scenario.team_size);
    for b in q.chunks_exact(dofs) {
        bases.push(Obb::yawed(Vector3::new(b[X], b[X + 1], b[Z]), model.base_half_extents, b[YAW]));
        let [s, e, t] = arm_points(model, b);
        links.push([
            Capsule { a: s, b: e, radius: LINK_RADIUS },
            Capsule { a: e, b: t, radius: LINK_RADIUS },
        ]);
    }
    let (structure, fit) = if with_structure && !scenario.structure.geometry.is_empty() {
        let fit = structure_fit(scenario, q);
        let boxes = scenario
            .structure
            .geometry
            .iter()
            .map(|sb| Obb {
                center: fit.apply(&sb.center),
                half_extents: sb.half_extents,
                rotation: fit.rotation,
            })
            .collect();
        (boxes, Some(fit))
    } else {
        (Vec::new(), None)
    };
    TeamGeometry { bases, links, structure, fit }
}

/// First colliding pair, or `None` when the configuration is free. Checks
/// bases, arm links and the fitted structure against the workspace bounds and
/// the obstacles, bases against each other, links against other robots'
/// bases and the structure against every base.
pub fn collision_check(scenario: &Scenario, q: &SystemConfiguration) -> Option<Collision> {
    let geo = team_geometry(scenario, q.as_slice(), true);
    first_collision(scenario, &geo)
}

pub fn first_collision(scenario: &Scenario, geo: &TeamGeometry) -> Option<Collision> {
    let env = &scenario.environment;
    let hit = |a: Body, b: Body| Some(Collision { a, b });

    for (i, b) in geo.bases.iter().enumerate() {
        if !env.bounds.contains(&b.bounds()) {
            return hit(Body::Base(i), Body::Bounds);
        }
    }
    for (k, s) in geo.structure.iter().enumerate() {
        if !env.bounds.contains(&s.bounds()) {
            return hit(Body::Structure(k), Body::Bounds);
        }
    }
    for (i, pair) in geo.links.iter().enumerate() {
        for (l, c) in pair.iter().enumerate() {
            if !env.bounds.contains(&c.bounds()) {
                return hit(Body::Link { robot: i, link: l }, Body::Bounds);
            }
        }
    }

    let team = geo.bounds();
    for (j, o) in env.obstacles.iter().enumerate() {
        if !team.intersects(o) {
            continue;
        }
        let ob = Obb::from_aabb(o);
        for (i, b) in geo.bases.iter().enumerate() {
            if b.bounds().intersects(o) && obb_intersects(b, &ob) {
                return hit(Body::Base(i), Body::Obstacle(j));
            }
        }
        for (i, pair) in geo.links.iter().enumerate() {
            for (l, c) in pair.iter().enumerate() {
                if capsule_aabb_intersects(c, o) {
                    return hit(Body::Link { robot: i, link: l }, Body::Obstacle(j));
                }
            }
        }
        for (k, s) in geo.structure.iter().enumerate() {
            if s.bounds().intersects(o) && obb_intersects(s, &ob) {
                return hit(Body::Structure(k), Body::Obstacle(j));
            }
        }
    }

    let n = geo.bases.len();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&geo.bases[i], &geo.bases[j]);
            if a.bounds().intersects(&b.bounds()) && obb_intersects(a, b) {
                return hit(Body::Base(i), Body::Base(j));
            }
        }
    }
    for (i, pair) in geo.links.iter().enumerate() {
        for (l, c) in pair.iter().enumerate() {
            for (j, b) in geo.bases.iter().enumerate() {
                if i != j && capsule_obb_intersects(c, b) {
                    return hit(Body::Link { robot: i, link: l }, Body::Base(j));
                }
            }
        }
    }
    for (k, s) in geo.structure.iter().enumerate() {
        for (j, b) in geo.bases.iter().enumerate() {
            if s.bounds().intersects(&b.bounds()) && obb_intersects(s, b) {
                return hit(Body::Structure(k), Body::Base(j));
            }
        }
    }
    None
}

/// Index of the first DoF outside its limits, over the whole team.
pub fn joint_limit_violation(scenario: &Scenario, q: &[f64]) -> Option<usize> {
    let dofs = scenario.dofs_per_robot();
    q.chunks_exact(dofs).enumerate().find_map(|(i, b)| {
        scenario.robot_model.joint_limits.first_violation(b).map(|d| i * dofs + d)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    pub max_nodes: usize,
    /// Extension attempts allowed per node of budget.
    pub iterations_per_node: usize,
    pub steer_step: f64,
    pub goal_bias: f64,
    pub goal_tolerance: f64,
    /// Extensions tried toward the goal once a node gets within twice the goal tolerance.
    pub connect_steps: usize,
    /// When false, steering skips projection and constraint checks (plain RRT).
    pub projection: bool,
    pub projection_solver: SolverParams,
    pub rng_seed: u64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            max_nodes: 5000,
            iterations_per_node: 10,
            steer_step: 0.3,
            goal_bias: 0.1,
            goal_tolerance: 0.2,
            connect_steps: 50,
            projection: true,
            projection_solver: SolverParams::default(),
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid planner parameters: {0}")]
    Params(String),
    #[error("start configuration rejected: {0}")]
    InvalidStart(String),
    #[error("goal configuration rejected: {0}")]
    InvalidGoal(String),
    #[error("path export requires a successful plan")]
    NoPath,
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::Params(m.to_string()));
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return bad("goal_bias must lie in [0, 1]");
        }
        if !(self.steer_step > 0.0) {
            return bad("steer_step must be positive");
        }
        if !(self.goal_tolerance > 0.0) {
            return bad("goal_tolerance must be positive");
        }
        if self.max_nodes == 0 {
            return bad("max_nodes must be at least 1");
        }
        self.projection_solver.validate().map_err(|e| PlanError::Params(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub config: SystemConfiguration,
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub iterations: usize,
    pub projections_attempted: usize,
    pub projections_succeeded: usize,
    /// Single-row updates summed over successful projections.
    pub projection_updates: usize,
    pub projection_time_s: f64,
    pub joint_limit_rejections: usize,
    pub fit_rejections: usize,
    pub collision_rejections: usize,
    pub edge_rejections: usize,
    pub wall_time_s: f64,
}

impl PlanStats {
    pub fn projection_success_rate(&self) -> f64 {
        if self.projections_attempted == 0 {
            0.0
        } else {
            self.projections_succeeded as f64 / self.projections_attempted as f64
        }
    }

    pub fn without_timing(&self) -> Self {
        Self { projection_time_s: 0.0, wall_time_s: 0.0, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub success: bool,
    pub nodes: Vec<PlanNode>,
    /// Node indices from start to goal; empty on failure.
    pub path: Vec<usize>,
    pub stats: PlanStats,
}

impl PlanResult {
    pub fn path_configs(&self) -> Vec<&SystemConfiguration> {
        self.path.iter().map(|&i| &self.nodes[i].config).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rejection {
    Projection,
    JointLimits,
    Fit,
    Collision,
    Edge,
}

struct Planner<'a> {
    scenario: &'a Scenario,
    system: Option<ConstraintSystem>,
    params: &'a PlannerParams,
    dofs: usize,
    fit_limit: f64,
    nodes: Vec<PlanNode>,
    stats: PlanStats,
}

impl Planner<'_> {
    fn metric(&self, a: &[f64], b: &[f64]) -> f64 {
        configuration_metric(a, b, self.dofs)
    }

    fn nearest(&self, q: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = self.metric(n.config.as_slice(), q);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Static validity of a node: limits, structure fit and collision.
    fn check_node(&self, q: &[f64]) -> Result<(), Rejection> {
        if joint_limit_violation(self.scenario, q).is_some() {
            return Err(Rejection::JointLimits);
        }
        let geo = team_geometry(self.scenario, q, self.params.projection);
        if let Some(fit) = geo.fit {
            if fit.max_error > self.fit_limit {
                return Err(Rejection::Fit);
            }
        }
        if first_collision(self.scenario, &geo).is_some() {
            return Err(Rejection::Collision);
        }
        Ok(())
    }

    fn edge_free(&self, a: &[f64], b: &[f64]) -> bool {
        let d = self.metric(a, b);
        let res = self.params.steer_step / 10.0;
        let n = (d / res).ceil() as usize;
        (1..n).all(|k| {
            let q = interpolate(a, b, k as f64 / n as f64, self.dofs);
            let geo = team_geometry(self.scenario, &q, self.params.projection);
            first_collision(self.scenario, &geo).is_none()
        })
    }

    fn project(&mut self, q: Vec<f64>) -> Result<Vec<f64>, Rejection> {
        let Some(sys) = &self.system else { return Ok(q) };
        let cfg = SystemConfiguration::from_flat(q, self.dofs).expect("layout checked");
        self.stats.projections_attempted += 1;
        let rep = project(sys, &cfg, &self.params.projection_solver).expect("inputs validated");
        self.stats.projection_time_s += rep.wall_time_s;
        if rep.status != Status::Converged {
            return Err(Rejection::Projection);
        }
        self.stats.projections_succeeded += 1;
        self.stats.projection_updates += rep.updates;
        let mut out = rep.result;
        out.normalize_yaws();
        Ok(out.into_vec())
    }

    /// Steers from node `from` toward `target` and adds the result.
    fn extend(&mut self, from: usize, target: &[f64]) -> Result<usize, Rejection> {
        let base = self.nodes[from].config.as_slice().to_vec();
        let d = self.metric(&base, target);
        let stepped = if d <= self.params.steer_step {
            target.to_vec()
        } else {
            interpolate(&base, target, self.params.steer_step / d, self.dofs)
        };
        let q = self.project(stepped)?;
        let res = self.check_node(&q).and_then(|_| {
            if self.edge_free(&base, &q) {
                Ok(())
            } else {
                Err(Rejection::Edge)
            }
        });
        if let Err(r) = res {
            match r {
                Rejection::JointLimits => self.stats.joint_limit_rejections += 1,
                Rejection::Fit => self.stats.fit_rejections += 1,
                Rejection::Collision => self.stats.collision_rejections += 1,
                Rejection::Edge => self.stats.edge_rejections += 1,
                Rejection::Projection => {}
            }
            return Err(r);
        }
        self.nodes.push(PlanNode {
            config: SystemConfiguration::from_flat(q, self.dofs).expect("layout checked"),
            parent: Some(from),
        });
        Ok(self.nodes.len() - 1)
    }

    /// Adds the exact goal as a child of `from` when close enough.
    fn try_goal(&mut self, from: usize, goal: &SystemConfiguration) -> bool {
        let q = self.nodes[from].config.as_slice();
        if q == goal.as_slice() {
            return true;
        }
        if self.metric(q, goal.as_slice()) > self.params.goal_tolerance || !self.edge_free(q, goal.as_slice()) {
            return false;
        }
        self.nodes.push(PlanNode { config: goal.clone(), parent: Some(from) });
        true
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let s = self.scenario;
        let b = &s.environment.bounds;
        let margin = s.footprint_radius();
        let position = Vector3::from_fn(|i, _| {
            let (lo, hi) = (b.min[i] + margin, b.max[i] - margin);
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                0.5 * (lo + hi)
            }
        });
        let pose = StructurePose::new(position, rng.gen_range(-PI..PI));
        let lim = &s.robot_model.joint_limits;
        let arms: Vec<(f64, [f64; 2])> = (0..s.team_size)
            .map(|_| {
                let a1 = rng.gen_range(lim.arm[0].lo..=lim.arm[0].hi);
                let a2 = (-a1).clamp(lim.arm[1].lo, lim.arm[1].hi);
                (rng.gen_range(-PI..PI), [a1, a2])
            })
            .collect();
        s.holding_configuration(&pose, &arms).into_vec()
    }
}

/// Validates start and goal, then grows the tree until the goal is reached
/// or the node or iteration budget runs out.
pub fn plan(
    scenario: &Scenario,
    start: &SystemConfiguration,
    goal: &SystemConfiguration,
    params: &PlannerParams,
) -> Result<PlanResult, PlanError> {
    params.validate()?;
    let started = Instant::now();
    let dofs = scenario.dofs_per_robot();
    for (which, q) in [("start", start), ("goal", goal)] {
        if q.dofs_per_robot() != dofs || q.team_size() != scenario.team_size {
            let msg = format!("{which} layout does not match the scenario team");
            return Err(if which == "start" { PlanError::InvalidStart(msg) } else { PlanError::InvalidGoal(msg) });
        }
    }
    let system = if params.projection { Some(scenario.system()?) } else { None };
    let fit_limit = 2.0
        * system
            .as_ref()
            .and_then(|s| s.manifold_threshold(ManifoldKind::StructureFixedDistance))
            .unwrap_or(ManifoldKind::StructureFixedDistance.default_threshold());
    let mut planner = Planner {
        scenario,
        system,
        params,
        dofs,
        fit_limit,
        nodes: vec![PlanNode { config: start.clone(), parent: None }],
        stats: PlanStats::default(),
    };
    for (which, q) in [("start", start), ("goal", goal)] {
        let err = |m: String| if which == "start" { PlanError::InvalidStart(m) } else { PlanError::InvalidGoal(m) };
        if let Some(sys) = &planner.system {
            let r = sys.eval(q.as_slice());
            if !sys.satisfied(&r) {
                return Err(err("constraints are not satisfied".into()));
            }
        }
        match planner.check_node(q.as_slice()) {
            Ok(()) => {}
            Err(Rejection::JointLimits) => return Err(err("joint limits violated".into())),
            Err(Rejection::Fit) => return Err(err("structure cannot be fitted to the end-effectors".into())),
            Err(_) => return Err(err("configuration is in collision".into())),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let max_iterations = params.max_nodes.saturating_mul(params.iterations_per_node);
    let mut goal_node = None;
    if planner.try_goal(0, goal) {
        goal_node = Some(planner.nodes.len() - 1);
    }
    while goal_node.is_none()
        && planner.stats.iterations < max_iterations
        && planner.nodes.len() < params.max_nodes
    {
        planner.stats.iterations += 1;
        let target = if rng.gen::<f64>() < params.goal_bias {
            goal.as_slice().to_vec()
        } else {
            planner.sample(&mut rng)
        };
        let near = planner.nearest(&target);
        let Ok(mut cur) = planner.extend(near, &target) else { continue };
        if planner.try_goal(cur, goal) {
            goal_node = Some(planner.nodes.len() - 1);
            break;
        }
        if planner.metric(planner.nodes[cur].config.as_slice(), goal.as_slice()) <= 2.0 * params.goal_tolerance {
            for _ in 0..params.connect_steps {
                if planner.nodes.len() >= params.max_nodes {
                    break;
                }
                match planner.extend(cur, goal.as_slice()) {
                    Ok(next) => cur = next,
                    Err(_) => break,
                }
                if planner.try_goal(cur, goal) {
                    goal_node = Some(planner.nodes.len() - 1);
                    break;
                }
            }
        }
    }

    let mut path = Vec::new();
    if let Some(mut i) = goal_node {
        if planner.nodes[i].config.as_slice() != goal.as_slice() {
            i = planner.nodes.len() - 1;
        }
        loop {
            path.push(i);
            match planner.nodes[i].parent {
                Some(p) => i = p,
                None => break,
            }
        }
        path.reverse();
    }
    let mut stats = planner.stats;
    stats.wall_time_s = started.elapsed().as_secs_f64();
    Ok(PlanResult { success: goal_node.is_some(), nodes: planner.nodes, path, stats })
}

/// Plans between the scenario's start and goal structure poses.
pub fn plan_scenario(scenario: &Scenario, params: &PlannerParams) -> Result<PlanResult, PlanError> {
    plan(scenario, &scenario.start_configuration(), &scenario.goal_configuration(), params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Constraint { row: usize, manifold: ManifoldKind, value: f64, threshold: f64 },
    JointLimit { dof: usize },
    Fit { max_error: f64 },
    Collision(Collision),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditViolation {
    pub waypoint: usize,
    pub violation: Violation,
}

/// Re-verifies every waypoint from scratch: a freshly assembled constraint
/// system, joint limits, the structure fit bound and collision.
pub fn audit_path(scenario: &Scenario, waypoints: &[SystemConfiguration]) -> Result<Vec<AuditViolation>, PlanError> {
    let system = if scenario.manifolds.is_empty() { None } else { Some(scenario.system()?) };
    let fit_limit = 2.0
        * system
            .as_ref()
            .and_then(|s| s.manifold_threshold(ManifoldKind::StructureFixedDistance))
            .unwrap_or(ManifoldKind::StructureFixedDistance.default_threshold());
    let mut out = Vec::new();
    for (w, q) in waypoints.iter().enumerate() {
        let mut push = |violation| out.push(AuditViolation { waypoint: w, violation });
        if let Some(sys) = &system {
            let r = sys.eval_residual(q)?;
            for (row, (v, eps)) in r.weighted.iter().zip(sys.threshold_vector()).enumerate() {
                if !(v.abs() <= *eps) {
                    let manifold = sys.manifolds().iter().find(|m| m.rows.contains(&row)).expect("row in a manifold").kind;
                    push(Violation::Constraint { row, manifold, value: *v, threshold: *eps });
                }
            }
            let fit = structure_fit(scenario, q.as_slice());
            if fit.max_error > fit_limit {
                push(Violation::Fit { max_error: fit.max_error });
            }
        }
        if let Some(dof) = joint_limit_violation(scenario, q.as_slice()) {
            push(Violation::JointLimit { dof });
        }
        let geo = team_geometry(scenario, q.as_slice(), system.is_some());
        if let Some(c) = first_collision(scenario, &geo) {
            push(Violation::Collision(c));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldMax {
    pub kind: ManifoldKind,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub robots: SystemConfiguration,
    /// Unweighted residual rows at this node.
    pub residual: Vec<f64>,
    pub manifold_max: Vec<ManifoldMax>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathFile {
    pub version: u32,
    pub scenario_id: String,
    pub seed: u64,
    pub params: PlannerParams,
    pub waypoints: Vec<Waypoint>,
    pub stats: PlanStats,
}

impl PathFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("path serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let p: PathFile = serde_path_to_error::deserialize(de)
            .map_err(|e| PlanError::Io { path: e.path().to_string(), message: e.inner().to_string() })?;
        if p.version != PATH_SCHEMA_VERSION {
            return Err(PlanError::Io {
                path: "version".into(),
                message: format!("unsupported path schema version {}", p.version),
            });
        }
        Ok(p)
    }

    pub fn write(&self, path: &Path) -> Result<(), PlanError> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|e| PlanError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn read(path: &Path) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PlanError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }
}

pub fn path_export(scenario: &Scenario, result: &PlanResult, params: &PlannerParams) -> Result<PathFile, PlanError> {
    if !result.success {
        return Err(PlanError::NoPath);
    }
    let system = if scenario.manifolds.is_empty() { None } else { Some(scenario.system()?) };
    let waypoints = result
        .path_configs()
        .into_iter()
        .map(|q| {
            let (residual, manifold_max) = match &system {
                Some(sys) => {
                    let r = sys.eval_residual(q)?;
                    let mm = sys
                        .manifolds()
                        .iter()
                        .map(|m| ManifoldMax {
                            kind: m.kind,
                            max_abs: r.unweighted[m.rows.clone()].iter().fold(0.0, |a, v| a.max(v.abs())),
                        })
                        .collect();
                    (r.unweighted, mm)
                }
                None => (Vec::new(), Vec::new()),
            };
            Ok(Waypoint { robots: q.clone(), residual, manifold_max })
        })
        .collect::<Result<Vec<_>, ConstraintError>>()?;
    Ok(PathFile {
        version: PATH_SCHEMA_VERSION,
        scenario_id: scenario.id.clone(),
        seed: params.rng_seed,
        params: params.clone(),
        waypoints,
        stats: result.stats.clone(),
    })
}

/// Top-down view: obstacles, workspace bounds, per-robot base traces and the
/// structure footprint at the first, last and every few intermediate waypoints.
pub fn render_path_svg(scenario: &Scenario, path: &PathFile) -> String {
    let b = &scenario.environment.bounds;
    let size = 800.0;
    let span = (b.max.x - b.min.x).max(b.max.y - b.min.y);
    let k = size / span;
    let tx = |x: f64| (x - b.min.x) * k;
    let ty = |y: f64| size - (y - b.min.y) * k;
    let mut svg = Svg::new(size, size);
    svg.rect(0.0, 0.0, size, size, "fill:#ffffff;stroke:#000000;stroke-width:1");
    for o in &scenario.environment.obstacles {
        svg.rect(
            tx(o.min.x),
            ty(o.max.y),
            (o.max.x - o.min.x) * k,
            (o.max.y - o.min.y) * k,
            "fill:#7f7f7f;fill-opacity:0.25;stroke:#555555;stroke-width:0.5",
        );
    }
    let n = scenario.team_size;
    for r in 0..n {
        let pts: Vec<_> = path
            .waypoints
            .iter()
            .map(|w| {
                let c = w.robots.robot(r);
                (tx(c.x), ty(c.y))
            })
            .collect();
        svg.polyline(&pts, &format!("stroke:{};stroke-width:1.2", PALETTE[r % PALETTE.len()]));
    }
    let every = (path.waypoints.len() / 8).max(1);
    for (i, w) in path.waypoints.iter().enumerate() {
        if i % every != 0 && i + 1 != path.waypoints.len() {
            continue;
        }
        let fit = structure_fit(scenario, w.robots.as_slice());
        for sb in &scenario.structure.geometry {
            let obb = Obb { center: fit.apply(&sb.center), half_extents: sb.half_extents, rotation: fit.rotation };
            let c = obb.corners();
            let quad = [c[0], c[1], c[3], c[2]].map(|p| (tx(p.x), ty(p.y)));
            svg.polygon(&quad, "fill:#000000;fill-opacity:0.6;stroke:none");
        }
        for r in 0..n {
            let c = w.robots.robot(r);
            svg.circle(tx(c.x), ty(c.y), 2.0, &format!("fill:{}", PALETTE[r % PALETTE.len()]));
        }
    }
    svg.text(8.0, 18.0, 14.0, &format!("{} ({} waypoints)", path.scenario_id, path.waypoints.len()));
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::RobotConfiguration;

    #[test]
    fn metric_examples() {
        let a = [0.0, 0.0, 0.0, -PI + 0.1, 0.0, 0.0];
        let b = [0.0, 0.0, 0.0, PI - 0.1, 0.0, 0.0];
        assert!((configuration_metric(&a, &b, 6) - 0.1).abs() < 1e-12);
        assert_eq!(configuration_metric(&a, &a, 6), 0.0);
    }

    #[test]
    fn interpolation_wraps_yaw() {
        let a = [0.0, 0.0, 0.0, PI - 0.1, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0, -PI + 0.1, 0.0, 0.0];
        let m = interpolate(&a, &b, 0.5, 6);
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert!((m[YAW].abs() - PI).abs() < 1e-12);
    }

    #[test]
    fn base_inside_obstacle_collides() {
        let mut s = Scenario::reference("S_3").unwrap();
        let q = s.start_configuration();
        assert!(collision_check(&s, &q).is_none());
        let c = q.robot(1);
        s.environment.obstacles.push(Aabb::from_center(Vector3::new(c.x, c.y, c.z), Vector3::repeat(0.5)));
        let hit = collision_check(&s, &q).unwrap();
        assert_eq!(hit.b, Body::Obstacle(0));
    }

    #[test]
    fn out_of_bounds_collides() {
        let s = Scenario::reference("S_3").unwrap();
        let mut robots = s.start_configuration().robots();
        robots[0].z = -5.0;
        let q = SystemConfiguration::from_robots(&robots).unwrap();
        assert_eq!(collision_check(&s, &q).unwrap().b, Body::Bounds);
    }

    #[test]
    fn trivial_plan() {
        let s = Scenario::reference("S_3").unwrap();
        let q = s.start_configuration();
        let r = plan(&s, &q, &q, &PlannerParams::default()).unwrap();
        assert!(r.success);
        assert_eq!(r.path, vec![0]);
        let file = path_export(&s, &r, &PlannerParams::default()).unwrap();
        assert_eq!(file.waypoints.len(), 1);
        assert!(render_path_svg(&s, &file).starts_with("<svg"));
    }

    #[test]
    fn rejects_invalid_start() {
        let s = Scenario::reference("S_3").unwrap();
        let mut robots = s.start_configuration().robots();
        robots[0].x += 0.3;
        let bad = SystemConfiguration::from_robots(&robots).unwrap();
        let err = plan(&s, &bad, &s.goal_configuration(), &PlannerParams::default()).unwrap_err();
        assert!(matches!(err, PlanError::InvalidStart(_)));
        let _ = RobotConfiguration::new(0.0, 0.0, 0.0, 0.0, [0.0; 2]);
    }

    #[test]
    fn export_requires_success() {
        let s = Scenario::reference("S_3").unwrap();
        let r = PlanResult { success: false, nodes: vec![], path: vec![], stats: PlanStats::default() };
        assert!(matches!(path_export(&s, &r, &PlannerParams::default()), Err(PlanError::NoPath)));
    }
}
