//! Constraint manifolds over the team configuration and their concatenation.
//!
//! Every manifold contributes a block of scalar rows. A row is satisfied when
//! its weighted value is within the manifold threshold in absolute value.
//! Rows are stored as values of `F`, so a Kaczmarz update reads
//! `q <- q - F_i / |g_i|^2 * g_i`.
//!
//! Row combinatorics (the default `Counting::Compact`):
//! * M1: one row per unordered pair `(i, j)`, `i < j`, lexicographic.
//! * M2: for each pair `(i, k)` the vertex `v` is the lowest robot index not in
//!   the pair. Two rows per pair: the cosine row `a.b - cos` and the
//!   cross-norm row `|a x b| - sin`, where `a`, `b` are the unit vectors
//!   `p_i - p_v` and `p_v - p_k`.
//! * M3: rows `u.o_k` with `u` a unit pair direction. For every anchored
//!   triple `{0, j, k}` whose contacts are collinear, three rows: `(j,k)` against
//!   robot 0, `(0,k)` against `j`, `(0,j)` against `k`. Without any collinear
//!   anchored triple a single row checks robot 0 against `(0,1)`. Two robots
//!   give one row per robot against `(0,1)`.
//! * M4: chain pairs `(i, i+1)`, row `P(p_i) - P(p_{i+1})`.
//! * M5: one row per robot.
//!
//! `Counting::Exhaustive` instead uses every pair for M1/M4, every triple and
//! vertex for M2 (cross rows only for collinear triples) and every
//! (pair, robot) combination for M3.

use std::ops::Range;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    end_effector_block, end_effector_jacobian_block, RobotModel, SystemConfiguration, CORE_DOFS,
    DOFS_WITH_VELOCITY, VEL_X, VEL_Y, YAW,
};

/// Gradients with a norm below this are treated as singular.
pub const SINGULAR_EPS: f64 = 1e-12;
const COLLINEAR_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("manifold list is empty")]
    NoManifolds,
    #[error("{kind} needs at least {needed} robots, team has {got}")]
    TeamTooSmall { kind: ManifoldKind, needed: usize, got: usize },
    #[error("{0} requires velocity DoFs in the configuration")]
    MissingVelocity(ManifoldKind),
    #[error("structure has {contacts} contact points but the team has {robots} robots")]
    ContactMismatch { contacts: usize, robots: usize },
    #[error("threshold for {kind} must be non-negative, got {value}")]
    BadThreshold { kind: ManifoldKind, value: f64 },
    #[error("weight for {kind} must be positive, got {value}")]
    BadWeight { kind: ManifoldKind, value: f64 },
    #[error("contact points {i} and {j} coincide")]
    CoincidentContacts { i: usize, j: usize },
    #[error("row {row} out of range for a system with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("configuration has {got} values, system expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Gradient of a row is undefined at this configuration.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("row {row} has a singular gradient")]
pub struct SingularRow {
    pub row: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ManifoldKind {
    #[serde(rename = "M1", alias = "StructureFixedDistance")]
    StructureFixedDistance,
    #[serde(rename = "M2", alias = "StructureFixedAngle")]
    StructureFixedAngle,
    #[serde(rename = "M3", alias = "TaskFixedOrient")]
    TaskFixedOrient,
    #[serde(rename = "M4", alias = "TaskSamePlane")]
    TaskSamePlane,
    #[serde(rename = "M5", alias = "RobotDiffDrive")]
    RobotDiffDrive,
}

impl ManifoldKind {
    pub const ALL: [ManifoldKind; 5] = [
        ManifoldKind::StructureFixedDistance,
        ManifoldKind::StructureFixedAngle,
        ManifoldKind::TaskFixedOrient,
        ManifoldKind::TaskSamePlane,
        ManifoldKind::RobotDiffDrive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ManifoldKind::StructureFixedDistance => "M1",
            ManifoldKind::StructureFixedAngle => "M2",
            ManifoldKind::TaskFixedOrient => "M3",
            ManifoldKind::TaskSamePlane => "M4",
            ManifoldKind::RobotDiffDrive => "M5",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label().eq_ignore_ascii_case(s) || format!("{k:?}") == s)
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            ManifoldKind::StructureFixedDistance => 5e-3,
            ManifoldKind::StructureFixedAngle => 1e-3,
            ManifoldKind::TaskFixedOrient => 1e-2,
            ManifoldKind::TaskSamePlane => 5e-3,
            ManifoldKind::RobotDiffDrive => 1e-3,
        }
    }

    fn min_team(self) -> usize {
        match self {
            ManifoldKind::StructureFixedAngle => 3,
            ManifoldKind::RobotDiffDrive => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for ManifoldKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Declarative manifold entry as written in scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    /// Plane normal for M4; `P(p) = n . p`, default `+z`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane_normal: Option<Vector3<f64>>,
}

fn unit_weight() -> f64 {
    1.0
}

impl ManifoldSpec {
    pub fn new(kind: ManifoldKind) -> Self {
        Self { kind, threshold: None, weight: 1.0, plane_normal: None }
    }

    pub fn with_threshold(mut self, eps: f64) -> Self {
        self.threshold = Some(eps);
        self
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.weight = w;
        self
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or_else(|| self.kind.default_threshold())
    }

    /// Specs with default thresholds for a list of kinds.
    pub fn defaults(kinds: &[ManifoldKind]) -> Vec<Self> {
        kinds.iter().map(|&k| Self::new(k)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Counting {
    #[default]
    Compact,
    Exhaustive,
}

/// Angle entry for an ordered arm triple `(i, vertex, k)`: vectors
/// `c_i - c_vertex` and `c_vertex - c_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleEntry {
    pub i: usize,
    pub vertex: usize,
    pub k: usize,
    pub cos: f64,
    pub cross: Vector3<f64>,
}

impl TripleEntry {
    pub fn sin(&self) -> f64 {
        self.cross.norm()
    }

    pub fn collinear(&self) -> bool {
        self.sin() < COLLINEAR_EPS
    }
}

/// Axis-aligned box in the structure frame, used for collision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StructureFile", into = "StructureFile")]
pub struct Structure {
    pub name: String,
    pub contact_points: Vec<Vector3<f64>>,
    pub geometry: Vec<StructureBox>,
    pair_distances: Vec<f64>,
    triples: Vec<TripleEntry>,
}

#[derive(Serialize, Deserialize)]
struct StructureFile {
    name: String,
    contact_points: Vec<Vector3<f64>>,
    #[serde(default)]
    geometry: Vec<StructureBox>,
}

impl TryFrom<StructureFile> for Structure {
    type Error = ConstraintError;
    fn try_from(f: StructureFile) -> Result<Self, Self::Error> {
        Structure::new(f.name, f.contact_points, f.geometry)
    }
}

impl From<Structure> for StructureFile {
    fn from(s: Structure) -> Self {
        StructureFile { name: s.name, contact_points: s.contact_points, geometry: s.geometry }
    }
}

/// Index of the unordered pair `(i, j)`, `i < j < n`, in lexicographic order.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// Unordered pairs in lexicographic order.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

impl Structure {
    pub fn new(
        name: impl Into<String>,
        contact_points: Vec<Vector3<f64>>,
        geometry: Vec<StructureBox>,
    ) -> Result<Self, ConstraintError> {
        let n = contact_points.len();
        let mut pair_distances = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for (i, j) in pairs(n) {
            let d = (contact_points[i] - contact_points[j]).norm();
            if d < SINGULAR_EPS {
                return Err(ConstraintError::CoincidentContacts { i, j });
            }
            pair_distances.push(d);
        }
        let mut triples = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    for (a, v, b) in [(j, i, k), (i, j, k), (i, k, j)] {
                        let u = (contact_points[a] - contact_points[v]).normalize();
                        let w = (contact_points[v] - contact_points[b]).normalize();
                        triples.push(TripleEntry {
                            i: a,
                            vertex: v,
                            k: b,
                            cos: u.dot(&w).clamp(-1.0, 1.0),
                            cross: u.cross(&w),
                        });
                    }
                }
            }
        }
        Ok(Self { name: name.into(), contact_points, geometry, pair_distances, triples })
    }

    pub fn len(&self) -> usize {
        self.contact_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contact_points.is_empty()
    }

    /// `L_{i,j}` for `i != j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.pair_distances[pair_index(self.len(), a, b)]
    }

    pub fn pair_distances(&self) -> &[f64] {
        &self.pair_distances
    }

    /// Angle table over all triples, three vertex choices each.
    pub fn triple_table(&self) -> &[TripleEntry] {
        &self.triples
    }

    /// Entry for arms `c_i - c_vertex`, `c_vertex - c_k`, computed on demand
    /// when the ordering differs from the stored one.
    pub fn triple(&self, i: usize, vertex: usize, k: usize) -> TripleEntry {
        if let Some(t) = self.triples.iter().find(|t| t.i == i && t.vertex == vertex && t.k == k) {
            return *t;
        }
        let c = &self.contact_points;
        let u = (c[i] - c[vertex]).normalize();
        let w = (c[vertex] - c[k]).normalize();
        TripleEntry { i, vertex, k, cos: u.dot(&w).clamp(-1.0, 1.0), cross: u.cross(&w) }
    }

    fn collinear(&self, a: usize, b: usize, c: usize) -> bool {
        self.triple(a, b, c).collinear()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.contact_points.iter().sum::<Vector3<f64>>() / self.len() as f64
    }
}

/// One scalar residual row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Row {
    /// `| |p_i - p_j| - length |`
    Distance { i: usize, j: usize, length: f64 },
    /// `a.b - cos` with `a = unit(p_i - p_v)`, `b = unit(p_v - p_k)`.
    AngleCos { i: usize, v: usize, k: usize, cos: f64 },
    /// `|a x b| - sin` with the same `a`, `b`.
    AngleSin { i: usize, v: usize, k: usize, sin: f64 },
    /// `unit(p_i - p_j) . o_orientee`
    Orient { i: usize, j: usize, orientee: usize },
    /// `n.p_i - n.p_j`
    Plane { i: usize, j: usize, normal: Vector3<f64> },
    /// `u_x sin(yaw) - u_y cos(yaw)`
    DiffDrive { robot: usize },
}

impl Row {
    /// Robots whose DoFs enter this row.
    pub fn robots(&self) -> Vec<usize> {
        let mut r = match *self {
            Row::Distance { i, j, .. } | Row::Plane { i, j, .. } => vec![i, j],
            Row::AngleCos { i, v, k, .. } | Row::AngleSin { i, v, k, .. } => vec![i, v, k],
            Row::Orient { i, j, orientee } => vec![i, j, orientee],
            Row::DiffDrive { robot } => vec![robot],
        };
        r.sort_unstable();
        r.dedup();
        r
    }
}

/// An assembled manifold: a contiguous block of rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintManifold {
    pub kind: ManifoldKind,
    pub intrinsic_dim: usize,
    pub threshold: f64,
    pub weight: f64,
    pub rows: Range<usize>,
}

/// Forward kinematics of every robot of a team.
#[derive(Clone, Debug)]
pub struct TeamKinematics {
    pub positions: Vec<Vector3<f64>>,
    pub orientations: Vec<Vector3<f64>>,
}

impl TeamKinematics {
    pub fn compute(model: &RobotModel, q: &[f64], dofs: usize) -> Self {
        let (positions, orientations) = q
            .chunks_exact(dofs)
            .map(|b| {
                let ee = end_effector_block(model, b);
                (ee.position, ee.orientation)
            })
            .unzip();
        Self { positions, orientations }
    }
}

/// Weighted and unweighted residual values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub weighted: Vec<f64>,
    pub unweighted: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ConstraintSystem {
    model: RobotModel,
    team_size: usize,
    dofs_per_robot: usize,
    manifolds: Vec<ConstraintManifold>,
    rows: Vec<Row>,
    row_manifold: Vec<usize>,
    thresholds: Vec<f64>,
    weights: Vec<f64>,
    robot_rows: Vec<Vec<usize>>,
}

fn manifold_rows(
    kind: ManifoldKind,
    spec: &ManifoldSpec,
    structure: &Structure,
    n: usize,
    counting: Counting,
) -> Vec<Row> {
    let mut rows = Vec::new();
    match kind {
        ManifoldKind::StructureFixedDistance => {
            for (i, j) in pairs(n) {
                rows.push(Row::Distance { i, j, length: structure.distance(i, j) });
            }
        }
        ManifoldKind::StructureFixedAngle => match counting {
            Counting::Compact => {
                for (i, k) in pairs(n) {
                    let v = (0..n).find(|&v| v != i && v != k).expect("n >= 3");
                    let t = structure.triple(i, v, k);
                    rows.push(Row::AngleCos { i, v, k, cos: t.cos });
                    rows.push(Row::AngleSin { i, v, k, sin: t.sin() });
                }
            }
            Counting::Exhaustive => {
                for t in structure.triple_table() {
                    rows.push(Row::AngleCos { i: t.i, v: t.vertex, k: t.k, cos: t.cos });
                    if t.collinear() {
                        rows.push(Row::AngleSin { i: t.i, v: t.vertex, k: t.k, sin: 0.0 });
                    }
                }
            }
        },
        ManifoldKind::TaskFixedOrient => match counting {
            Counting::Compact if n == 2 => {
                rows.push(Row::Orient { i: 0, j: 1, orientee: 0 });
                rows.push(Row::Orient { i: 0, j: 1, orientee: 1 });
            }
            Counting::Compact => {
                for (j, k) in pairs(n).filter(|&(j, _)| j >= 1) {
                    if structure.collinear(j, 0, k) {
                        rows.push(Row::Orient { i: j, j: k, orientee: 0 });
                        rows.push(Row::Orient { i: 0, j: k, orientee: j });
                        rows.push(Row::Orient { i: 0, j, orientee: k });
                    }
                }
                if rows.is_empty() {
                    rows.push(Row::Orient { i: 0, j: 1, orientee: 0 });
                }
            }
            Counting::Exhaustive => {
                for (i, j) in pairs(n) {
                    for orientee in 0..n {
                        rows.push(Row::Orient { i, j, orientee });
                    }
                }
            }
        },
        ManifoldKind::TaskSamePlane => {
            let normal = spec.plane_normal.unwrap_or_else(Vector3::z);
            match counting {
                Counting::Compact => {
                    for i in 0..n - 1 {
                        rows.push(Row::Plane { i, j: i + 1, normal });
                    }
                }
                Counting::Exhaustive => {
                    for (i, j) in pairs(n) {
                        rows.push(Row::Plane { i, j, normal });
                    }
                }
            }
        }
        ManifoldKind::RobotDiffDrive => {
            for robot in 0..n {
                rows.push(Row::DiffDrive { robot });
            }
        }
    }
    rows
}

impl ConstraintSystem {
    pub fn assemble(
        model: &RobotModel,
        team_size: usize,
        dofs_per_robot: usize,
        structure: &Structure,
        specs: &[ManifoldSpec],
        counting: Counting,
    ) -> Result<Self, ConstraintError> {
        let n = team_size;
        if specs.is_empty() {
            return Err(ConstraintError::NoManifolds);
        }
        let needs_structure = specs.iter().any(|s| s.kind != ManifoldKind::RobotDiffDrive);
        if needs_structure && structure.len() != n {
            return Err(ConstraintError::ContactMismatch { contacts: structure.len(), robots: n });
        }
        let mut manifolds = Vec::with_capacity(specs.len());
        let mut rows = Vec::new();
        let mut row_manifold = Vec::new();
        let mut thresholds = Vec::new();
        let mut weights = Vec::new();
        for (mi, spec) in specs.iter().enumerate() {
            let kind = spec.kind;
            if n < kind.min_team() {
                return Err(ConstraintError::TeamTooSmall { kind, needed: kind.min_team(), got: n });
            }
            if kind == ManifoldKind::RobotDiffDrive && dofs_per_robot != DOFS_WITH_VELOCITY {
                return Err(ConstraintError::MissingVelocity(kind));
            }
            let eps = spec.threshold();
            if !(eps >= 0.0) {
                return Err(ConstraintError::BadThreshold { kind, value: eps });
            }
            if !(spec.weight > 0.0) {
                return Err(ConstraintError::BadWeight { kind, value: spec.weight });
            }
            let block = manifold_rows(kind, spec, structure, n, counting);
            let start = rows.len();
            let dim = block.len();
            rows.extend(block);
            row_manifold.extend(std::iter::repeat(mi).take(dim));
            thresholds.extend(std::iter::repeat(eps).take(dim));
            weights.extend(std::iter::repeat(spec.weight).take(dim));
            manifolds.push(ConstraintManifold {
                kind,
                intrinsic_dim: dim,
                threshold: eps,
                weight: spec.weight,
                rows: start..start + dim,
            });
        }
        let mut robot_rows = vec![Vec::new(); n];
        for (ri, row) in rows.iter().enumerate() {
            for r in row.robots() {
                robot_rows[r].push(ri);
            }
        }
        Ok(Self {
            model: model.clone(),
            team_size: n,
            dofs_per_robot,
            manifolds,
            rows,
            row_manifold,
            thresholds,
            weights,
            robot_rows,
        })
    }

    /// System for a single robot model with default thresholds.
    pub fn with_defaults(
        model: &RobotModel,
        structure: &Structure,
        kinds: &[ManifoldKind],
    ) -> Result<Self, ConstraintError> {
        Self::assemble(
            model,
            structure.len(),
            CORE_DOFS,
            structure,
            &ManifoldSpec::defaults(kinds),
            Counting::Compact,
        )
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn team_size(&self) -> usize {
        self.team_size
    }

    pub fn dofs_per_robot(&self) -> usize {
        self.dofs_per_robot
    }

    /// Dimension `m` of the configuration vector.
    pub fn dim(&self) -> usize {
        self.team_size * self.dofs_per_robot
    }

    /// Number of rows `l`.
    pub fn total_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn manifolds(&self) -> &[ConstraintManifold] {
        &self.manifolds
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row(&self, row: usize) -> &Row {
        &self.rows[row]
    }

    /// `(manifold index, local row)`.
    pub fn row_map(&self, row: usize) -> (usize, usize) {
        let m = self.row_manifold[row];
        (m, row - self.manifolds[m].rows.start)
    }

    pub fn threshold_vector(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Smallest manifold threshold, the default global threshold for baselines.
    pub fn min_threshold(&self) -> f64 {
        self.thresholds.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Rows involving `robot`.
    pub fn rows_touching(&self, robot: usize) -> &[usize] {
        &self.robot_rows[robot]
    }

    pub fn manifold_threshold(&self, kind: ManifoldKind) -> Option<f64> {
        self.manifolds.iter().find(|m| m.kind == kind).map(|m| m.threshold)
    }

    pub fn check_dim(&self, q: &[f64]) -> Result<(), ConstraintError> {
        if q.len() != self.dim() {
            return Err(ConstraintError::DimensionMismatch { got: q.len(), expected: self.dim() });
        }
        Ok(())
    }

    pub fn kinematics(&self, q: &[f64]) -> TeamKinematics {
        TeamKinematics::compute(&self.model, q, self.dofs_per_robot)
    }

    fn block<'a>(&self, q: &'a [f64], robot: usize) -> &'a [f64] {
        &q[robot * self.dofs_per_robot..(robot + 1) * self.dofs_per_robot]
    }

    fn row_value(&self, row: &Row, kin: &TeamKinematics, q: &[f64]) -> f64 {
        let p = &kin.positions;
        match *row {
            Row::Distance { i, j, length } => ((p[i] - p[j]).norm() - length).abs(),
            Row::AngleCos { i, v, k, cos } => {
                let (a, b) = (p[i] - p[v], p[v] - p[k]);
                unit_or_zero(&a).dot(&unit_or_zero(&b)) - cos
            }
            Row::AngleSin { i, v, k, sin } => {
                let (a, b) = (p[i] - p[v], p[v] - p[k]);
                unit_or_zero(&a).cross(&unit_or_zero(&b)).norm() - sin
            }
            Row::Orient { i, j, orientee } => {
                unit_or_zero(&(p[i] - p[j])).dot(&kin.orientations[orientee])
            }
            Row::Plane { i, j, normal } => normal.dot(&p[i]) - normal.dot(&p[j]),
            Row::DiffDrive { robot } => {
                let b = self.block(q, robot);
                b[VEL_X] * b[YAW].sin() - b[VEL_Y] * b[YAW].cos()
            }
        }
    }

    /// Unweighted value of a single row.
    pub fn eval_row_unweighted(&self, q: &[f64], row: usize) -> f64 {
        let kin = self.kinematics(q);
        self.row_value(&self.rows[row], &kin, q)
    }

    /// Weighted residual `F(q)` written into `out`.
    pub fn eval_into(&self, q: &[f64], out: &mut [f64]) {
        let kin = self.kinematics(q);
        for (ri, row) in self.rows.iter().enumerate() {
            out[ri] = self.weights[ri] * self.row_value(row, &kin, q);
        }
    }

    /// Refreshes only the listed rows of `out`.
    pub fn eval_rows_into(&self, q: &[f64], rows: &[usize], out: &mut [f64]) {
        let kin = self.kinematics(q);
        for &ri in rows {
            out[ri] = self.weights[ri] * self.row_value(&self.rows[ri], &kin, q);
        }
    }

    pub fn eval(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total_rows()];
        self.eval_into(q, &mut out);
        out
    }

    pub fn eval_residual(&self, q: &SystemConfiguration) -> Result<Residual, ConstraintError> {
        let q = q.as_slice();
        self.check_dim(q)?;
        let kin = self.kinematics(q);
        let unweighted: Vec<f64> = self.rows.iter().map(|r| self.row_value(r, &kin, q)).collect();
        let weighted = unweighted.iter().zip(&self.weights).map(|(v, w)| v * w).collect();
        Ok(Residual { weighted, unweighted })
    }

    /// Unweighted rows of one manifold.
    pub fn eval_manifold(&self, q: &[f64], manifold: usize) -> Vec<f64> {
        let kin = self.kinematics(q);
        self.manifolds[manifold].rows.clone().map(|r| self.row_value(&self.rows[r], &kin, q)).collect()
    }

    /// Per-row satisfaction `|r_i| <= eps_i` for a weighted residual.
    pub fn satisfied(&self, weighted: &[f64]) -> bool {
        weighted.iter().zip(&self.thresholds).all(|(r, e)| r.abs() <= *e)
    }

    /// Gradient of the weighted row, written densely into `out` (length `m`).
    pub fn jacobian_row_into(
        &self,
        q: &[f64],
        kin: &TeamKinematics,
        row: usize,
        out: &mut [f64],
    ) -> Result<(), SingularRow> {
        out.iter_mut().for_each(|v| *v = 0.0);
        let w = self.weights[row];
        let p = &kin.positions;
        let o = &kin.orientations;
        let singular = Err(SingularRow { row });
        // Per-robot derivative w.r.t. end-effector position and orientation.
        let mut parts: [(usize, Vector3<f64>, Vector3<f64>); 3] = [(usize::MAX, Vector3::zeros(), Vector3::zeros()); 3];
        let mut add = |robot: usize, dp: Vector3<f64>, dori: Vector3<f64>| {
            for slot in parts.iter_mut() {
                if slot.0 == robot {
                    slot.1 += dp;
                    slot.2 += dori;
                    return;
                }
                if slot.0 == usize::MAX {
                    *slot = (robot, dp, dori);
                    return;
                }
            }
        };
        let zero = Vector3::zeros();
        match self.rows[row] {
            Row::Distance { i, j, length } => {
                let d = p[i] - p[j];
                let n = d.norm();
                if n < SINGULAR_EPS {
                    return singular;
                }
                let sign = if n - length >= 0.0 { 1.0 } else { -1.0 };
                let g = d * (sign / n);
                add(i, g, zero);
                add(j, -g, zero);
            }
            Row::AngleCos { i, v, k, .. } => {
                let (a, b) = (p[i] - p[v], p[v] - p[k]);
                let (na, nb) = (a.norm(), b.norm());
                if na < SINGULAR_EPS || nb < SINGULAR_EPS {
                    return singular;
                }
                let (ah, bh) = (a / na, b / nb);
                let c = ah.dot(&bh);
                let ga = (bh - ah * c) / na;
                let gb = (ah - bh * c) / nb;
                add(i, ga, zero);
                add(v, gb - ga, zero);
                add(k, -gb, zero);
            }
            Row::AngleSin { i, v, k, .. } => {
                let (a, b) = (p[i] - p[v], p[v] - p[k]);
                let (na, nb) = (a.norm(), b.norm());
                if na < SINGULAR_EPS || nb < SINGULAR_EPS {
                    return singular;
                }
                let (ah, bh) = (a / na, b / nb);
                let c = ah.cross(&bh);
                let s = c.norm();
                if s < SINGULAR_EPS {
                    return singular;
                }
                let ch = c / s;
                let ta = bh.cross(&ch);
                let tb = ch.cross(&ah);
                let ga = (ta - ah * ah.dot(&ta)) / na;
                let gb = (tb - bh * bh.dot(&tb)) / nb;
                add(i, ga, zero);
                add(v, gb - ga, zero);
                add(k, -gb, zero);
            }
            Row::Orient { i, j, orientee } => {
                let d = p[i] - p[j];
                let n = d.norm();
                if n < SINGULAR_EPS {
                    return singular;
                }
                let u = d / n;
                let ok = o[orientee];
                let gd = (ok - u * u.dot(&ok)) / n;
                add(i, gd, zero);
                add(j, -gd, zero);
                add(orientee, zero, u);
            }
            Row::Plane { i, j, normal } => {
                add(i, normal, zero);
                add(j, -normal, zero);
            }
            Row::DiffDrive { robot } => {
                let b = self.block(q, robot);
                let (s, c) = b[YAW].sin_cos();
                let off = robot * self.dofs_per_robot;
                out[off + YAW] = w * (b[VEL_X] * c + b[VEL_Y] * s);
                out[off + VEL_X] = w * s;
                out[off + VEL_Y] = w * -c;
                return Ok(());
            }
        }
        for (robot, dp, dori) in parts {
            if robot == usize::MAX {
                break;
            }
            let block = self.block(q, robot);
            let jac = end_effector_jacobian_block(&self.model, block);
            let off = robot * self.dofs_per_robot;
            let gp = jac.position.tr_mul(&dp);
            let go = jac.orientation.tr_mul(&dori);
            for c in 0..CORE_DOFS {
                out[off + c] = w * (gp[c] + go[c]);
            }
        }
        let norm2: f64 = out.iter().map(|v| v * v).sum();
        if norm2.sqrt() < SINGULAR_EPS {
            return singular;
        }
        Ok(())
    }

    /// Gradient of one weighted row with respect to the full configuration.
    pub fn eval_jacobian_row(&self, q: &[f64], row: usize) -> Result<Vec<f64>, JacobianError> {
        self.check_dim(q).map_err(JacobianError::Structural)?;
        if row >= self.total_rows() {
            return Err(JacobianError::Structural(ConstraintError::RowOutOfRange {
                row,
                rows: self.total_rows(),
            }));
        }
        let kin = self.kinematics(q);
        let mut out = vec![0.0; self.dim()];
        self.jacobian_row_into(q, &kin, row, &mut out).map_err(JacobianError::Singular)?;
        Ok(out)
    }

    /// Full `l x m` Jacobian; singular rows are left as zeros and reported.
    pub fn jacobian(&self, q: &[f64]) -> (nalgebra::DMatrix<f64>, Vec<usize>) {
        let kin = self.kinematics(q);
        let (l, m) = (self.total_rows(), self.dim());
        let mut jac = nalgebra::DMatrix::zeros(l, m);
        let mut buf = vec![0.0; m];
        let mut singular = Vec::new();
        for r in 0..l {
            match self.jacobian_row_into(q, &kin, r, &mut buf) {
                Ok(()) => {
                    for c in 0..m {
                        jac[(r, c)] = buf[c];
                    }
                }
                Err(_) => singular.push(r),
            }
        }
        (jac, singular)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum JacobianError {
    #[error(transparent)]
    Structural(ConstraintError),
    #[error(transparent)]
    Singular(SingularRow),
}

fn unit_or_zero(v: &Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n < SINGULAR_EPS {
        Vector3::zeros()
    } else {
        v / n
    }
}

fn single_manifold(
    model: &RobotModel,
    q: &SystemConfiguration,
    structure: &Structure,
    spec: ManifoldSpec,
) -> Result<Vec<f64>, ConstraintError> {
    let sys = ConstraintSystem::assemble(
        model,
        q.team_size(),
        q.dofs_per_robot(),
        structure,
        &[spec],
        Counting::Compact,
    )?;
    sys.check_dim(q.as_slice())?;
    Ok(sys.eval_manifold(q.as_slice(), 0))
}

/// M1 rows for every pair.
pub fn eval_m1(
    model: &RobotModel,
    q: &SystemConfiguration,
    structure: &Structure,
) -> Result<Vec<f64>, ConstraintError> {
    single_manifold(model, q, structure, ManifoldSpec::new(ManifoldKind::StructureFixedDistance))
}

pub fn eval_m2(
    model: &RobotModel,
    q: &SystemConfiguration,
    structure: &Structure,
) -> Result<Vec<f64>, ConstraintError> {
    single_manifold(model, q, structure, ManifoldSpec::new(ManifoldKind::StructureFixedAngle))
}

pub fn eval_m3(
    model: &RobotModel,
    q: &SystemConfiguration,
    structure: &Structure,
) -> Result<Vec<f64>, ConstraintError> {
    single_manifold(model, q, structure, ManifoldSpec::new(ManifoldKind::TaskFixedOrient))
}

/// M4 rows; the sign is `P(p_i) - P(p_{i+1})`.
pub fn eval_m4(
    model: &RobotModel,
    q: &SystemConfiguration,
    structure: &Structure,
    plane_normal: Vector3<f64>,
) -> Result<Vec<f64>, ConstraintError> {
    let mut spec = ManifoldSpec::new(ManifoldKind::TaskSamePlane);
    spec.plane_normal = Some(plane_normal);
    single_manifold(model, q, structure, spec)
}

pub fn eval_m5(q: &SystemConfiguration) -> Result<Vec<f64>, ConstraintError> {
    if !q.has_velocity() {
        return Err(ConstraintError::MissingVelocity(ManifoldKind::RobotDiffDrive));
    }
    Ok(q
        .as_slice()
        .chunks_exact(q.dofs_per_robot())
        .map(|b| b[VEL_X] * b[YAW].sin() - b[VEL_Y] * b[YAW].cos())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::RobotConfiguration;
    use std::f64::consts::PI;

    fn straight(n: usize) -> Structure {
        let pts = (0..n).map(|i| Vector3::new(0.5 * i as f64, 0.0, 0.0)).collect();
        Structure::new("straight", pts, vec![]).unwrap()
    }

    /// Team whose end-effectors sit exactly at `points` with arms vertical.
    fn at_points(points: &[Vector3<f64>]) -> SystemConfiguration {
        let robots: Vec<_> = points
            .iter()
            .map(|p| RobotConfiguration::new(p.x, p.y, p.z - 0.5, 0.0, [0.0, 0.0]))
            .collect();
        SystemConfiguration::from_robots(&robots).unwrap()
    }

    #[test]
    fn pair_index_is_lexicographic() {
        for n in 2..8 {
            for (idx, (i, j)) in pairs(n).enumerate() {
                assert_eq!(pair_index(n, i, j), idx);
            }
        }
    }

    #[test]
    fn m1_examples() {
        let m = RobotModel::default();
        let s = straight(2);
        let q = at_points(&[Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0)]);
        assert!(eval_m1(&m, &q, &s).unwrap()[0].abs() < 1e-15);
        let q = at_points(&[Vector3::zeros(), Vector3::new(0.6, 0.0, 0.0)]);
        assert!((eval_m1(&m, &q, &s).unwrap()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn m2_collinear_satisfied() {
        let m = RobotModel::default();
        let s = straight(3);
        let q = at_points(&s.contact_points.clone());
        let r = eval_m2(&m, &q, &s).unwrap();
        assert_eq!(r.len(), 6);
        assert!(r.iter().all(|v| v.abs() < 1e-12), "{r:?}");
    }

    #[test]
    fn m2_right_angle() {
        let m = RobotModel::default();
        let pts = vec![Vector3::new(-0.5, 0.0, 0.0), Vector3::new(0.5, 0.0, 0.0), Vector3::new(0.0, -0.5, 0.0)];
        let s = Structure::new("t", pts.clone(), vec![]).unwrap();
        let t = s.triple(0, 2, 1);
        assert!(t.cos.abs() < 1e-12);
        let q = at_points(&pts);
        assert!(eval_m2(&m, &q, &s).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn m3_examples() {
        let m = RobotModel::default();
        let s = straight(3);
        let q = at_points(&s.contact_points.clone());
        assert!(eval_m3(&m, &q, &s).unwrap().iter().all(|v| v.abs() < 1e-15));
        // Robot 0 arm tilted to horizontal along +y; yaw -pi/2 turns body +y into world +x.
        let mut robots = q.robots();
        robots[0].yaw = -PI / 2.0;
        robots[0].arm = [PI / 2.0, 0.0];
        let q = SystemConfiguration::from_robots(&robots).unwrap();
        let sys = ConstraintSystem::with_defaults(&m, &s, &[ManifoldKind::TaskFixedOrient]).unwrap();
        let r = sys.eval(q.as_slice());
        // row ((1,2), 0): unit(p1 - p2) = -x, o_0 = +x
        assert!((r[0] + 1.0).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn m4_sign() {
        let m = RobotModel::default();
        let s = straight(2);
        let q = at_points(&[Vector3::new(0.0, 0.0, 0.5), Vector3::new(0.5, 0.0, 0.7)]);
        let r = eval_m4(&m, &q, &s, Vector3::z()).unwrap();
        assert!((r[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn m5_examples() {
        let mk = |yaw: f64, u: [f64; 2]| {
            SystemConfiguration::from_robots(&[RobotConfiguration::new(0.0, 0.0, 0.0, yaw, [0.0; 2]).with_velocity(u)])
                .unwrap()
        };
        assert_eq!(eval_m5(&mk(0.0, [1.0, 0.0])).unwrap()[0], 0.0);
        assert_eq!(eval_m5(&mk(0.0, [0.0, 1.0])).unwrap()[0], -1.0);
        assert!(eval_m5(&mk(PI / 4.0, [1.0, 1.0])).unwrap()[0].abs() < 1e-15);
        let no_vel = SystemConfiguration::from_robots(&[RobotConfiguration::new(0.0, 0.0, 0.0, 0.0, [0.0; 2])]).unwrap();
        assert!(eval_m5(&no_vel).is_err());
    }

    #[test]
    fn row_counts_compact() {
        let m = RobotModel::default();
        let s = straight(3);
        use ManifoldKind::*;
        let count = |k: &[ManifoldKind]| ConstraintSystem::with_defaults(&m, &s, k).unwrap().total_rows();
        assert_eq!(count(&[StructureFixedDistance, TaskFixedOrient]), 6);
        assert_eq!(count(&[TaskFixedOrient, TaskSamePlane]), 5);
        assert_eq!(count(&[StructureFixedDistance, StructureFixedAngle, TaskFixedOrient]), 12);
        assert_eq!(count(&[StructureFixedDistance, StructureFixedAngle, TaskFixedOrient, TaskSamePlane]), 14);
        let two = straight(2);
        assert_eq!(ConstraintSystem::with_defaults(&m, &two, &[StructureFixedDistance]).unwrap().total_rows(), 1);
        assert_eq!(ConstraintSystem::with_defaults(&m, &two, &[TaskFixedOrient]).unwrap().total_rows(), 2);
    }

    #[test]
    fn m2_needs_three_robots() {
        let m = RobotModel::default();
        let err = ConstraintSystem::with_defaults(&m, &straight(2), &[ManifoldKind::StructureFixedAngle]).unwrap_err();
        assert!(matches!(err, ConstraintError::TeamTooSmall { needed: 3, got: 2, .. }));
    }

    #[test]
    fn m4_gradient_is_z_difference() {
        let m = RobotModel::default();
        let s = straight(3);
        let sys = ConstraintSystem::with_defaults(&m, &s, &[ManifoldKind::TaskSamePlane]).unwrap();
        let q = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.1, 0.2, 0.3, -0.4, 0.5, -0.6, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let g = sys.eval_jacobian_row(&q, 0).unwrap();
        assert_eq!(g[2], 1.0);
        assert_eq!(g[8], -1.0);
        assert!(g[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coincident_points_are_singular() {
        let m = RobotModel::default();
        let s = straight(2);
        let sys = ConstraintSystem::with_defaults(&m, &s, &[ManifoldKind::StructureFixedDistance]).unwrap();
        let q = vec![0.0; 12];
        assert!(matches!(sys.eval_jacobian_row(&q, 0), Err(JacobianError::Singular(_))));
        assert!((sys.eval(&q)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn structure_serde_recomputes_tables() {
        let s = straight(4);
        let json = serde_json::to_string(&s).unwrap();
        let back: Structure = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
