//! Scenario definitions: structures, teams, manifold sets and cluttered
//! environments, plus the bundled reference scenarios.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    ConstraintError, ConstraintSystem, Counting, ManifoldKind, ManifoldSpec, Structure, StructureBox,
};
use crate::geometry::Aabb;
use crate::kinematics::{
    wrap_angle, ModelError, RobotConfiguration, RobotModel, SystemConfiguration, CORE_DOFS,
    DOFS_WITH_VELOCITY,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Default contact spacing along straight structures, meters.
pub const DEFAULT_SPACING: f64 = 0.5;
/// Thickness of structure members used for collision, meters.
pub const MEMBER_THICKNESS: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("straight structure length {length} is not a positive multiple of spacing {spacing}")]
    SpacingMismatch { length: f64, spacing: f64 },
    #[error("spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("unknown structure kind `{0}`")]
    UnknownKind(String),
    #[error("unknown reference scenario `{0}`")]
    UnknownScenario(String),
    #[error("unsupported schema version {0}, expected {SCHEMA_VERSION}")]
    Version(u32),
    #[error("structure has {contacts} contact points but team size is {team}")]
    TeamMismatch { contacts: usize, team: usize },
    #[error("could not place obstacles for {class:?} after {attempts} attempts")]
    Placement { class: Complexity, attempts: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: at `{field}`: {message}")]
    Parse { path: String, field: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructureKind {
    Straight { length: f64 },
    T,
    I,
}

fn member(center: Vector3<f64>, half_x: f64, half_y: f64) -> StructureBox {
    let t = MEMBER_THICKNESS / 2.0;
    StructureBox { center, half_extents: Vector3::new(half_x.max(t), half_y.max(t), t) }
}

/// Builds a structure in its own frame, centered on the contact centroid's x-y.
///
/// * Straight: contacts every `spacing` along x, a single bar.
/// * T: crossbar of 1 m with contacts at both ends, a stem of half that with a
///   contact at its foot.
/// * I: square frame with contacts at the four corners and the center.
pub fn make_structure(kind: StructureKind, spacing: f64) -> Result<Structure, ScenarioError> {
    if !(spacing > 0.0) {
        return Err(ScenarioError::BadSpacing(spacing));
    }
    let (name, contacts, geometry) = match kind {
        StructureKind::Straight { length } => {
            let segments = length / spacing;
            let k = segments.round();
            if !(length > 0.0) || (segments - k).abs() > 1e-9 || k < 1.0 {
                return Err(ScenarioError::SpacingMismatch { length, spacing });
            }
            let n = k as usize + 1;
            let contacts: Vec<_> =
                (0..n).map(|i| Vector3::new(i as f64 * spacing - length / 2.0, 0.0, 0.0)).collect();
            (format!("straight_{length}"), contacts, vec![member(Vector3::zeros(), length / 2.0, 0.0)])
        }
        StructureKind::T => {
            let w = 2.0 * spacing;
            let contacts = vec![
                Vector3::new(-w / 2.0, 0.0, 0.0),
                Vector3::new(w / 2.0, 0.0, 0.0),
                Vector3::new(0.0, -spacing, 0.0),
            ];
            let geometry = vec![
                member(Vector3::zeros(), w / 2.0, 0.0),
                member(Vector3::new(0.0, -spacing / 2.0, 0.0), 0.0, spacing / 2.0),
            ];
            ("T".to_string(), contacts, geometry)
        }
        StructureKind::I => {
            let h = spacing;
            let contacts = vec![
                Vector3::new(-h, h, 0.0),
                Vector3::new(h, h, 0.0),
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(-h, -h, 0.0),
                Vector3::new(h, -h, 0.0),
            ];
            let geometry = vec![
                member(Vector3::new(0.0, h, 0.0), h, 0.0),
                member(Vector3::zeros(), 0.0, h),
                member(Vector3::new(0.0, -h, 0.0), h, 0.0),
            ];
            ("I".to_string(), contacts, geometry)
        }
    };
    Ok(Structure::new(name, contacts, geometry)?)
}

/// Position and heading of the structure frame in the world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructurePose {
    pub position: Vector3<f64>,
    #[serde(default)]
    pub yaw: f64,
}

impl StructurePose {
    pub fn new(position: Vector3<f64>, yaw: f64) -> Self {
        Self { position, yaw }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw) * p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Complexity {
    Low,
    Medium,
    Hard,
}

impl Complexity {
    pub const ALL: [Complexity; 3] = [Complexity::Low, Complexity::Medium, Complexity::Hard];

    /// Obstacle volume fraction band `[lo, hi)`; Hard includes its upper bound.
    pub fn band(self) -> (f64, f64) {
        match self {
            Complexity::Low => (0.05, 0.10),
            Complexity::Medium => (0.10, 0.20),
            Complexity::Hard => (0.20, 0.30),
        }
    }

    pub fn in_band(self, ratio: f64) -> bool {
        let (lo, hi) = self.band();
        match self {
            Complexity::Hard => ratio >= lo && ratio <= hi,
            _ => ratio >= lo && ratio < hi,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Complexity::Low => "Low",
            Complexity::Medium => "Medium",
            Complexity::Hard => "Hard",
        }
    }
}

impl std::str::FromStr for Complexity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Complexity::Low),
            "medium" => Ok(Complexity::Medium),
            "hard" => Ok(Complexity::Hard),
            o => Err(format!("unknown complexity `{o}` (expected low, medium or hard)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub bounds: Aabb,
    #[serde(default)]
    pub obstacles: Vec<Aabb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complexity: Option<Complexity>,
    #[serde(default)]
    pub clutter_ratio: f64,
}

impl Environment {
    pub fn empty(bounds: Aabb) -> Self {
        Self { bounds, obstacles: vec![], complexity: None, clutter_ratio: 0.0 }
    }

    pub fn default_bounds() -> Aabb {
        Aabb::new(Vector3::zeros(), Vector3::repeat(20.0))
    }

    pub fn recompute_ratio(&self) -> f64 {
        self.obstacles.iter().map(Aabb::volume).sum::<f64>() / self.bounds.volume()
    }
}

const OBSTACLE_HALF_MIN: f64 = 0.5;
const OBSTACLE_HALF_MAX: f64 = 2.0;
const PLACEMENT_ATTEMPTS: usize = 200_000;

/// Seeded random axis-aligned boxes, pairwise disjoint, inside `bounds`, and
/// disjoint from every `keep_clear` box. The target ratio is drawn inside
/// the class band and boxes are added until it is reached.
pub fn generate_environment(
    complexity: Complexity,
    bounds: Aabb,
    seed: u64,
    keep_clear: &[Aabb],
) -> Result<Environment, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = complexity.band();
    let total = bounds.volume();
    let target = rng.gen_range(lo..hi);
    let size = bounds.max - bounds.min;
    let mut obstacles: Vec<Aabb> = Vec::new();
    let mut filled = 0.0;
    let mut attempts = 0;
    while filled / total < target {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(ScenarioError::Placement { class: complexity, attempts });
        }
        // Near the target, shrink candidates so the band is not overshot.
        let room = ((hi - 1e-9) * total - filled).max(0.0);
        let max_half = OBSTACLE_HALF_MAX.min((room / 8.0).cbrt()).max(0.05);
        let min_half = OBSTACLE_HALF_MIN.min(max_half);
        let half = Vector3::from_fn(|i, _| {
            let h = if max_half > min_half { rng.gen_range(min_half..max_half) } else { min_half };
            h.min(size[i] / 2.0)
        });
        let center = Vector3::from_fn(|i, _| {
            let (a, b) = (bounds.min[i] + half[i], bounds.max[i] - half[i]);
            if b > a {
                rng.gen_range(a..b)
            } else {
                0.5 * (a + b)
            }
        });
        let cand = Aabb::from_center(center, half);
        if keep_clear.iter().any(|c| c.intersects(&cand)) || obstacles.iter().any(|o| o.intersects(&cand)) {
            continue;
        }
        filled += cand.volume();
        obstacles.push(cand);
    }
    let env = Environment { bounds, obstacles, complexity: Some(complexity), clutter_ratio: filled / total };
    debug_assert!(complexity.in_band(env.clutter_ratio));
    Ok(env)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub id: String,
    pub robot_model: RobotModel,
    pub team_size: usize,
    #[serde(default)]
    pub with_velocity: bool,
    pub structure: Structure,
    pub manifolds: Vec<ManifoldSpec>,
    #[serde(default)]
    pub counting: Counting,
    pub environment: Environment,
    pub start: StructurePose,
    pub goal: StructurePose,
    #[serde(default)]
    pub seed: u64,
}

pub const REFERENCE_IDS: [&str; 6] = ["T_3", "S_3", "S_4", "I_5", "S_5", "S_6"];

/// Kinds used by all reference planning scenarios.
pub const PLANNING_MANIFOLDS: [ManifoldKind; 4] = [
    ManifoldKind::StructureFixedDistance,
    ManifoldKind::StructureFixedAngle,
    ManifoldKind::TaskFixedOrient,
    ManifoldKind::TaskSamePlane,
];

/// Height at which reference start and goal poses carry the structure.
pub const CARRY_HEIGHT: f64 = 10.0;
/// Inset of reference start/goal from the workspace corners.
pub const CORNER_INSET: f64 = 2.5;

impl Scenario {
    pub fn reference(id: &str) -> Result<Self, ScenarioError> {
        let kind = match id {
            "T_3" => StructureKind::T,
            "I_5" => StructureKind::I,
            "S_3" => StructureKind::Straight { length: 1.0 },
            "S_4" => StructureKind::Straight { length: 1.5 },
            "S_5" => StructureKind::Straight { length: 2.0 },
            "S_6" => StructureKind::Straight { length: 2.5 },
            other => return Err(ScenarioError::UnknownScenario(other.to_string())),
        };
        let structure = make_structure(kind, DEFAULT_SPACING)?;
        let bounds = Environment::default_bounds();
        let lo = bounds.min + Vector3::new(CORNER_INSET, CORNER_INSET, 0.0);
        let hi = bounds.max - Vector3::new(CORNER_INSET, CORNER_INSET, 0.0);
        Ok(Self {
            version: SCHEMA_VERSION,
            id: id.to_string(),
            robot_model: RobotModel::default(),
            team_size: structure.len(),
            with_velocity: false,
            structure,
            manifolds: ManifoldSpec::defaults(&PLANNING_MANIFOLDS),
            counting: Counting::Compact,
            environment: Environment::empty(bounds),
            start: StructurePose::new(Vector3::new(lo.x, lo.y, CARRY_HEIGHT), 0.0),
            goal: StructurePose::new(Vector3::new(hi.x, hi.y, CARRY_HEIGHT), 0.0),
            seed: 0,
        })
    }

    pub fn references() -> Vec<Self> {
        REFERENCE_IDS.iter().map(|id| Self::reference(id).expect("reference ids are valid")).collect()
    }

    pub fn dofs_per_robot(&self) -> usize {
        if self.with_velocity {
            DOFS_WITH_VELOCITY
        } else {
            CORE_DOFS
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.version != SCHEMA_VERSION {
            return Err(ScenarioError::Version(self.version));
        }
        self.robot_model.validate()?;
        if self.structure.len() != self.team_size {
            return Err(ScenarioError::TeamMismatch { contacts: self.structure.len(), team: self.team_size });
        }
        let env = &self.environment;
        if let Some(o) = env.obstacles.iter().find(|o| !env.bounds.contains(o)) {
            return Err(ScenarioError::Invalid(format!("obstacle {o:?} leaves the workspace bounds")));
        }
        if !self.manifolds.is_empty() {
            self.system()?;
        }
        Ok(())
    }

    pub fn system(&self) -> Result<ConstraintSystem, ConstraintError> {
        ConstraintSystem::assemble(
            &self.robot_model,
            self.team_size,
            self.dofs_per_robot(),
            &self.structure,
            &self.manifolds,
            self.counting,
        )
    }

    /// Same scenario with a different manifold list.
    pub fn with_manifolds(&self, kinds: &[ManifoldKind]) -> Self {
        Self { manifolds: ManifoldSpec::defaults(kinds), ..self.clone() }
    }

    /// Team holding the structure at `pose`: each end-effector on its contact,
    /// base yaw equal to the structure yaw, arms straight up.
    pub fn nominal_configuration(&self, pose: &StructurePose) -> SystemConfiguration {
        let arms = vec![(pose.yaw, [0.0, 0.0]); self.team_size];
        self.holding_configuration(pose, &arms)
    }

    /// Team holding the structure at `pose` with given per-robot yaw and arm
    /// angles; each base is placed so that its end-effector lies on its contact.
    pub fn holding_configuration(&self, pose: &StructurePose, arms: &[(f64, [f64; 2])]) -> SystemConfiguration {
        let m = &self.robot_model;
        let robots: Vec<RobotConfiguration> = self
            .structure
            .contact_points
            .iter()
            .zip(arms)
            .map(|(c, &(yaw, arm))| {
                let target = pose.apply(c);
                let probe = RobotConfiguration::new(0.0, 0.0, 0.0, yaw, arm);
                let ee = crate::kinematics::forward_kinematics(m, &probe).position;
                let base = target - ee;
                let mut r = RobotConfiguration::new(base.x, base.y, base.z, wrap_angle(yaw), arm);
                if self.with_velocity {
                    r = r.with_velocity([yaw.cos(), yaw.sin()]);
                }
                r
            })
            .collect();
        SystemConfiguration::from_robots(&robots).expect("nonempty team")
    }

    pub fn start_configuration(&self) -> SystemConfiguration {
        self.nominal_configuration(&self.start)
    }

    pub fn goal_configuration(&self) -> SystemConfiguration {
        self.nominal_configuration(&self.goal)
    }

    /// Radius of a ball around a structure pose that covers the carried
    /// structure and the robots holding it.
    pub fn footprint_radius(&self) -> f64 {
        let c = self.structure.centroid();
        let spread = self.structure.contact_points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
        let half = self.robot_model.base_half_extents.norm();
        spread + self.robot_model.straight_up_reach() + half
    }

    /// Boxes around start and goal that generated obstacles must avoid.
    pub fn keep_clear_regions(&self) -> Vec<Aabb> {
        let r = self.footprint_radius() + 0.5;
        [self.start, self.goal]
            .iter()
            .map(|p| Aabb::from_center(p.position, Vector3::repeat(r)))
            .collect()
    }

    /// Copy with a freshly generated environment.
    pub fn with_environment(&self, complexity: Complexity, seed: u64) -> Result<Self, ScenarioError> {
        let env = generate_environment(complexity, self.environment.bounds, seed, &self.keep_clear_regions())?;
        Ok(Self { environment: env, seed, ..self.clone() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Parse {
            path: origin.to_string(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    Scenario::from_json(&text, &path.display().to_string())
}

pub fn save_scenario(scenario: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    fs::write(path, scenario.to_json() + "\n")
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

/// Random team near the structure for projection trials: the structure is
/// placed at a uniform pose inside `bounds` (inset by `margin`), each base is
/// offset from its nominal position by up to `spread` per axis, and yaw and
/// arm angles are uniform over their limits.
pub fn sample_trial_configuration<R: Rng>(
    scenario: &Scenario,
    rng: &mut R,
    spread: f64,
    margin: f64,
) -> SystemConfiguration {
    let b = &scenario.environment.bounds;
    let position = Vector3::from_fn(|i, _| rng.gen_range(b.min[i] + margin..b.max[i] - margin));
    let pose = StructurePose::new(position, rng.gen_range(-PI..PI));
    let nominal = scenario.nominal_configuration(&pose);
    let lim = &scenario.robot_model.joint_limits;
    let robots: Vec<_> = nominal
        .robots()
        .into_iter()
        .map(|mut r| {
            r.x += rng.gen_range(-spread..=spread);
            r.y += rng.gen_range(-spread..=spread);
            r.z += rng.gen_range(-spread..=spread);
            r.yaw = wrap_angle(rng.gen_range(-PI..PI));
            r.arm = [rng.gen_range(lim.arm[0].lo..=lim.arm[0].hi), rng.gen_range(lim.arm[1].lo..=lim.arm[1].hi)];
            if let Some(u) = r.velocity.as_mut() {
                *u = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            }
            r
        })
        .collect();
    SystemConfiguration::from_robots(&robots).expect("nonempty team")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_contacts() {
        let s = make_structure(StructureKind::Straight { length: 1.0 }, 0.5).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s.distance(0, 1) - 0.5).abs() < 1e-12);
        assert!((s.distance(1, 2) - 0.5).abs() < 1e-12);
        assert!((s.distance(0, 2) - 1.0).abs() < 1e-12);
        assert!(s.triple_table().iter().all(|t| t.collinear()));
        let s6 = make_structure(StructureKind::Straight { length: 2.5 }, 0.5).unwrap();
        assert_eq!(s6.len(), 6);
    }

    #[test]
    fn spacing_mismatch() {
        assert!(matches!(
            make_structure(StructureKind::Straight { length: 1.2 }, 0.5),
            Err(ScenarioError::SpacingMismatch { .. })
        ));
    }

    #[test]
    fn reference_dimensions() {
        let dims: Vec<_> = Scenario::references().iter().map(|s| s.system().unwrap().total_rows()).collect();
        assert_eq!(dims, vec![12, 14, 30, 37, 52, 80]);
    }

    #[test]
    fn nominal_configuration_satisfies_constraints() {
        for s in Scenario::references() {
            let sys = s.system().unwrap();
            for pose in [s.start, s.goal, StructurePose::new(Vector3::new(5.0, 6.0, 7.0), 2.0)] {
                let r = sys.eval_residual(&s.nominal_configuration(&pose)).unwrap();
                assert!(r.weighted.iter().all(|v| v.abs() < 1e-9), "{} {:?}", s.id, r.weighted);
            }
        }
    }

    #[test]
    fn environment_determinism_and_bands() {
        let s = Scenario::reference("S_3").unwrap();
        for c in Complexity::ALL {
            let a = s.with_environment(c, 7).unwrap();
            let b = s.with_environment(c, 7).unwrap();
            assert_eq!(a.environment, b.environment);
            assert!(c.in_band(a.environment.clutter_ratio));
            assert!((a.environment.recompute_ratio() - a.environment.clutter_ratio).abs() < 1e-9);
            for k in s.keep_clear_regions() {
                assert!(a.environment.obstacles.iter().all(|o| !o.intersects(&k)));
            }
        }
    }

    #[test]
    fn json_round_trip_and_field_paths() {
        let s = Scenario::reference("I_5").unwrap();
        let back = Scenario::from_json(&s.to_json(), "mem").unwrap();
        assert_eq!(back, s);
        let broken = s.to_json().replace("\"team_size\": 5", "\"team_size\": \"five\"");
        match Scenario::from_json(&broken, "mem") {
            Err(ScenarioError::Parse { field, .. }) => assert_eq!(field, "team_size"),
            other => panic!("{other:?}"),
        }
    }
}
