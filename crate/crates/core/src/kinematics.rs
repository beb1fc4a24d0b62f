//! Simulated mobile-manipulator model and its forward kinematics.
//!
//! Every robot is a cube-shaped base with four positional degrees of freedom
//! `(x, y, z, yaw)` carrying a planar two-link arm. The arm operates in the
//! Y-Z plane of the base body frame, joint angles are measured from the body
//! `+z` axis, and at zero angles the chain points straight up from the top
//! center of the base.
//!
//! A robot's configuration block is laid out as
//! `[x, y, z, yaw, arm_1, arm_2]`, optionally followed by the planar
//! velocity `[u_x, u_y]` when the scenario carries velocity DoFs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const X: usize = 0;
pub const Y: usize = 1;
pub const Z: usize = 2;
pub const YAW: usize = 3;
pub const ARM_1: usize = 4;
pub const ARM_2: usize = 5;
pub const VEL_X: usize = 6;
pub const VEL_Y: usize = 7;

/// Degrees of freedom of a robot without velocity channels.
pub const CORE_DOFS: usize = 6;
/// Degrees of freedom of a robot carrying `(u_x, u_y)`.
pub const DOFS_WITH_VELOCITY: usize = 8;

/// Default bound used for unconstrained position DoFs.
pub const UNBOUNDED: f64 = 1.0e6;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("link length {index} must be strictly positive, got {value}")]
    NonPositiveLink { index: usize, value: f64 },
    #[error("joint limit for {dof} has lower bound {lo} above upper bound {hi}")]
    InvertedLimit { dof: &'static str, lo: f64, hi: f64 },
    #[error("configuration has {got} values, expected a multiple of {per_robot}")]
    BadLength { got: usize, per_robot: usize },
    #[error("a system configuration needs at least one robot")]
    EmptyTeam,
    #[error("robots disagree on whether velocity DoFs are present")]
    MixedVelocity,
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub base_position: [Interval; 3],
    pub yaw: Interval,
    pub arm: [Interval; 2],
    pub velocity: [Interval; 2],
}

impl Default for JointLimits {
    fn default() -> Self {
        let free = Interval::new(-UNBOUNDED, UNBOUNDED);
        let half_turn = Interval::new(-PI / 2.0, PI / 2.0);
        Self {
            base_position: [free; 3],
            yaw: Interval::new(-PI, PI),
            arm: [half_turn; 2],
            velocity: [Interval::new(-1.0, 1.0); 2],
        }
    }
}

impl JointLimits {
    /// Interval for DoF `dof` of a robot block.
    pub fn for_dof(&self, dof: usize) -> Interval {
        match dof {
            X | Y | Z => self.base_position[dof],
            YAW => self.yaw,
            ARM_1 => self.arm[0],
            ARM_2 => self.arm[1],
            VEL_X => self.velocity[0],
            VEL_Y => self.velocity[1],
            _ => panic!("robot block has no DoF {dof}"),
        }
    }

    /// Index of the first DoF in `block` that is outside its interval.
    pub fn first_violation(&self, block: &[f64]) -> Option<usize> {
        block
            .iter()
            .enumerate()
            .find(|&(dof, &v)| !self.for_dof(dof).contains(v))
            .map(|(dof, _)| dof)
    }
}

/// Geometry and limits shared by every robot of a team.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub base_half_extents: Vector3<f64>,
    pub link_lengths: [f64; 2],
    pub arm_mount_offset: Vector3<f64>,
    pub joint_limits: JointLimits,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            base_half_extents: Vector3::new(0.2, 0.2, 0.2),
            link_lengths: [0.2, 0.1],
            arm_mount_offset: Vector3::new(0.0, 0.0, 0.2),
            joint_limits: JointLimits::default(),
        }
    }
}

impl RobotModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (index, &value) in self.link_lengths.iter().enumerate() {
            if !(value > 0.0) {
                return Err(ModelError::NonPositiveLink { index, value });
            }
        }
        let l = &self.joint_limits;
        let named = [
            ("x", l.base_position[0]),
            ("y", l.base_position[1]),
            ("z", l.base_position[2]),
            ("yaw", l.yaw),
            ("arm_1", l.arm[0]),
            ("arm_2", l.arm[1]),
            ("u_x", l.velocity[0]),
            ("u_y", l.velocity[1]),
        ];
        for (dof, iv) in named {
            if !(iv.lo <= iv.hi) {
                return Err(ModelError::InvertedLimit { dof, lo: iv.lo, hi: iv.hi });
            }
        }
        Ok(())
    }

    /// Arm tip offset from the base center when the arm is at zero angles.
    pub fn straight_up_reach(&self) -> f64 {
        self.arm_mount_offset.z + self.link_lengths[0] + self.link_lengths[1]
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotConfiguration {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub arm: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
}

impl RobotConfiguration {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64, arm: [f64; 2]) -> Self {
        Self { x, y, z, yaw, arm, velocity: None }
    }

    pub fn with_velocity(mut self, u: [f64; 2]) -> Self {
        self.velocity = Some(u);
        self
    }

    pub fn dofs(&self) -> usize {
        if self.velocity.is_some() {
            DOFS_WITH_VELOCITY
        } else {
            CORE_DOFS
        }
    }

    pub fn to_block(&self) -> Vec<f64> {
        let mut b = vec![self.x, self.y, self.z, self.yaw, self.arm[0], self.arm[1]];
        if let Some(u) = self.velocity {
            b.extend_from_slice(&u);
        }
        b
    }

    pub fn from_block(block: &[f64]) -> Self {
        let velocity = (block.len() >= DOFS_WITH_VELOCITY).then(|| [block[VEL_X], block[VEL_Y]]);
        Self {
            x: block[X],
            y: block[Y],
            z: block[Z],
            yaw: block[YAW],
            arm: [block[ARM_1], block[ARM_2]],
            velocity,
        }
    }
}

/// Stacked configuration of an `n`-robot team, stored flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<RobotConfiguration>", try_from = "Vec<RobotConfiguration>")]
pub struct SystemConfiguration {
    values: Vec<f64>,
    dofs_per_robot: usize,
}

impl From<SystemConfiguration> for Vec<RobotConfiguration> {
    fn from(s: SystemConfiguration) -> Self {
        s.robots()
    }
}

impl TryFrom<Vec<RobotConfiguration>> for SystemConfiguration {
    type Error = ModelError;
    fn try_from(robots: Vec<RobotConfiguration>) -> Result<Self, Self::Error> {
        Self::from_robots(&robots)
    }
}

impl SystemConfiguration {
    pub fn from_robots(robots: &[RobotConfiguration]) -> Result<Self, ModelError> {
        let first = robots.first().ok_or(ModelError::EmptyTeam)?;
        let dofs_per_robot = first.dofs();
        if robots.iter().any(|r| r.dofs() != dofs_per_robot) {
            return Err(ModelError::MixedVelocity);
        }
        let values = robots.iter().flat_map(|r| r.to_block()).collect();
        Ok(Self { values, dofs_per_robot })
    }

    pub fn from_flat(values: Vec<f64>, dofs_per_robot: usize) -> Result<Self, ModelError> {
        if dofs_per_robot != CORE_DOFS && dofs_per_robot != DOFS_WITH_VELOCITY {
            return Err(ModelError::BadLength { got: values.len(), per_robot: dofs_per_robot });
        }
        if values.is_empty() {
            return Err(ModelError::EmptyTeam);
        }
        if values.len() % dofs_per_robot != 0 {
            return Err(ModelError::BadLength { got: values.len(), per_robot: dofs_per_robot });
        }
        Ok(Self { values, dofs_per_robot })
    }

    pub fn team_size(&self) -> usize {
        self.values.len() / self.dofs_per_robot
    }

    pub fn dofs_per_robot(&self) -> usize {
        self.dofs_per_robot
    }

    pub fn has_velocity(&self) -> bool {
        self.dofs_per_robot == DOFS_WITH_VELOCITY
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, robot: usize) -> &[f64] {
        let r = self.dofs_per_robot;
        &self.values[robot * r..(robot + 1) * r]
    }

    pub fn robot(&self, robot: usize) -> RobotConfiguration {
        RobotConfiguration::from_block(self.block(robot))
    }

    pub fn robots(&self) -> Vec<RobotConfiguration> {
        (0..self.team_size()).map(|i| self.robot(i)).collect()
    }

    /// Wraps every yaw into `(-pi, pi]`.
    pub fn normalize_yaws(&mut self) {
        let r = self.dofs_per_robot;
        for block in self.values.chunks_mut(r) {
            block[YAW] = wrap_angle(block[YAW]);
        }
    }

    /// Copy with a different flat vector of the same layout.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self { values, dofs_per_robot: self.dofs_per_robot }
    }
}

/// End-effector position and unit direction of the distal link, world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EndEffector {
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
}

/// Derivatives of the end-effector w.r.t. the six kinematic DoFs of one robot.
#[derive(Clone, Copy, Debug)]
pub struct EndEffectorJacobian {
    pub position: SMatrix<f64, 3, 6>,
    pub orientation: SMatrix<f64, 3, 6>,
}

#[inline]
fn rotate_yaw(c: f64, s: f64, v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

#[inline]
fn rotate_yaw_derivative(c: f64, s: f64, v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-s * v.x - c * v.y, c * v.x - s * v.y, 0.0)
}

/// Shoulder, elbow and tip of the arm in the base body frame (relative to base center).
fn arm_points_body(model: &RobotModel, block: &[f64]) -> [Vector3<f64>; 3] {
    let [l1, l2] = model.link_lengths;
    let (a1, a12) = (block[ARM_1], block[ARM_1] + block[ARM_2]);
    let shoulder = model.arm_mount_offset;
    let elbow = shoulder + Vector3::new(0.0, l1 * a1.sin(), l1 * a1.cos());
    let tip = elbow + Vector3::new(0.0, l2 * a12.sin(), l2 * a12.cos());
    [shoulder, elbow, tip]
}

/// Shoulder, elbow and tip of the arm in world coordinates.
pub fn arm_points(model: &RobotModel, block: &[f64]) -> [Vector3<f64>; 3] {
    let (s, c) = block[YAW].sin_cos();
    let base = Vector3::new(block[X], block[Y], block[Z]);
    arm_points_body(model, block).map(|p| base + rotate_yaw(c, s, &p))
}

pub(crate) fn end_effector_block(model: &RobotModel, block: &[f64]) -> EndEffector {
    let (s, c) = block[YAW].sin_cos();
    let base = Vector3::new(block[X], block[Y], block[Z]);
    let tip = arm_points_body(model, block)[2];
    let a12 = block[ARM_1] + block[ARM_2];
    let dir = Vector3::new(0.0, a12.sin(), a12.cos());
    EndEffector {
        position: base + rotate_yaw(c, s, &tip),
        orientation: rotate_yaw(c, s, &dir),
    }
}

pub(crate) fn end_effector_jacobian_block(model: &RobotModel, block: &[f64]) -> EndEffectorJacobian {
    let (s, c) = block[YAW].sin_cos();
    let [l1, l2] = model.link_lengths;
    let a1 = block[ARM_1];
    let a12 = a1 + block[ARM_2];
    let (s1, c1) = a1.sin_cos();
    let (s12, c12) = a12.sin_cos();
    let tip = arm_points_body(model, block)[2];
    let dir = Vector3::new(0.0, s12, c12);

    let mut position = SMatrix::<f64, 3, 6>::zeros();
    let mut orientation = SMatrix::<f64, 3, 6>::zeros();
    position[(0, X)] = 1.0;
    position[(1, Y)] = 1.0;
    position[(2, Z)] = 1.0;
    position.set_column(YAW, &rotate_yaw_derivative(c, s, &tip));
    let d1 = Vector3::new(0.0, l1 * c1 + l2 * c12, -l1 * s1 - l2 * s12);
    let d2 = Vector3::new(0.0, l2 * c12, -l2 * s12);
    position.set_column(ARM_1, &rotate_yaw(c, s, &d1));
    position.set_column(ARM_2, &rotate_yaw(c, s, &d2));

    orientation.set_column(YAW, &rotate_yaw_derivative(c, s, &dir));
    let dd = rotate_yaw(c, s, &Vector3::new(0.0, c12, -s12));
    orientation.set_column(ARM_1, &dd);
    orientation.set_column(ARM_2, &dd);
    EndEffectorJacobian { position, orientation }
}

/// End-effector position and distal-link direction of one robot.
pub fn forward_kinematics(model: &RobotModel, config: &RobotConfiguration) -> EndEffector {
    end_effector_block(model, &config.to_block())
}

/// `6 x r` Jacobian: rows 0..3 are position, rows 3..6 orientation.
/// Velocity columns, when present, are zero.
pub fn fk_jacobian(model: &RobotModel, config: &RobotConfiguration) -> DMatrix<f64> {
    let block = config.to_block();
    let j = end_effector_jacobian_block(model, &block);
    let mut out = DMatrix::zeros(6, block.len());
    for col in 0..CORE_DOFS {
        for row in 0..3 {
            out[(row, col)] = j.position[(row, col)];
            out[(row + 3, col)] = j.orientation[(row, col)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Vector4};

    fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    /// Independent homogeneous-transform chain: base translation, yaw about z,
    /// mount translation, then two rotations about the body x axis (a positive
    /// angle tilts the link from +z toward +y) each followed by a translation
    /// along the link's local +z.
    fn transform_chain(model: &RobotModel, q: &RobotConfiguration) -> (Vector3<f64>, Vector3<f64>) {
        let trans = |v: Vector3<f64>| {
            let mut m = Matrix4::identity();
            m[(0, 3)] = v.x;
            m[(1, 3)] = v.y;
            m[(2, 3)] = v.z;
            m
        };
        let rot_z = |a: f64| {
            let (s, c) = a.sin_cos();
            let mut m = Matrix4::identity();
            m[(0, 0)] = c;
            m[(0, 1)] = -s;
            m[(1, 0)] = s;
            m[(1, 1)] = c;
            m
        };
        // Rotation about x by -a maps +z onto (0, sin a, cos a).
        let rot_x = |a: f64| {
            let (s, c) = (-a).sin_cos();
            let mut m = Matrix4::identity();
            m[(1, 1)] = c;
            m[(1, 2)] = -s;
            m[(2, 1)] = s;
            m[(2, 2)] = c;
            m
        };
        let t = trans(Vector3::new(q.x, q.y, q.z))
            * rot_z(q.yaw)
            * trans(model.arm_mount_offset)
            * rot_x(q.arm[0])
            * trans(Vector3::new(0.0, 0.0, model.link_lengths[0]))
            * rot_x(q.arm[1])
            * trans(Vector3::new(0.0, 0.0, model.link_lengths[1]));
        let p = t * Vector4::new(0.0, 0.0, 0.0, 1.0);
        let d = t * Vector4::new(0.0, 0.0, 1.0, 0.0);
        (p.xyz(), d.xyz())
    }

    #[test]
    fn zero_angles_stack_straight_up() {
        let m = RobotModel::default();
        let q = RobotConfiguration::new(0.0, 0.0, 0.0, 0.0, [0.0, 0.0]);
        let ee = forward_kinematics(&m, &q);
        assert!(close(&ee.position, &Vector3::new(0.0, 0.0, 0.5), 1e-15));
        assert!(close(&ee.orientation, &Vector3::z(), 1e-15));
    }

    #[test]
    fn vertical_chain_is_yaw_invariant() {
        let m = RobotModel::default();
        let q = RobotConfiguration::new(0.0, 0.0, 0.0, PI / 2.0, [0.0, 0.0]);
        let ee = forward_kinematics(&m, &q);
        assert!(close(&ee.position, &Vector3::new(0.0, 0.0, 0.5), 1e-15));
        assert!(close(&ee.orientation, &Vector3::z(), 1e-15));
    }

    #[test]
    fn matches_transform_chain_oracle() {
        let m = RobotModel::default();
        let q = RobotConfiguration::new(1.0, 0.0, 0.0, 0.0, [PI / 2.0, 0.0]);
        let ee = forward_kinematics(&m, &q);
        let (p, d) = transform_chain(&m, &q);
        // Shoulder at (1, 0, 0.2), both links lying along +y.
        assert!(close(&p, &Vector3::new(1.0, 0.3, 0.2), 1e-15));
        assert!(close(&ee.position, &p, 1e-14));
        assert!(close(&ee.orientation, &d, 1e-14));

        let q = RobotConfiguration::new(0.3, -1.2, 2.0, 0.7, [0.4, -1.1]);
        let ee = forward_kinematics(&m, &q);
        let (p, d) = transform_chain(&m, &q);
        assert!(close(&ee.position, &p, 1e-14));
        assert!(close(&ee.orientation, &d, 1e-14));
    }

    #[test]
    fn jacobian_simple_columns() {
        let m = RobotModel::default();
        let q = RobotConfiguration::new(0.0, 0.0, 0.0, 0.0, [0.0, 0.0]);
        let j = fk_jacobian(&m, &q);
        assert_eq!(j.column(X).rows(0, 3).clone_owned(), Vector3::x());
        assert!(j.column(YAW).rows(0, 3).norm() < 1e-15);
    }

    #[test]
    fn velocity_columns_are_zero() {
        let m = RobotModel::default();
        let q = RobotConfiguration::new(0.1, 0.2, 0.3, 0.4, [0.5, 0.6]).with_velocity([1.0, 2.0]);
        let j = fk_jacobian(&m, &q);
        assert_eq!(j.ncols(), 8);
        assert!(j.column(VEL_X).norm() == 0.0 && j.column(VEL_Y).norm() == 0.0);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trip() {
        let robots = vec![
            RobotConfiguration::new(1.0, 2.0, 3.0, 0.1, [0.2, 0.3]),
            RobotConfiguration::new(-1.0, 0.5, 0.0, -2.0, [-0.2, 1.3]),
        ];
        let sys = SystemConfiguration::from_robots(&robots).unwrap();
        assert_eq!(sys.as_slice().len(), 12);
        assert_eq!(sys.robots(), robots);
        let again = SystemConfiguration::from_flat(sys.as_slice().to_vec(), 6).unwrap();
        assert_eq!(again, sys);
    }

    #[test]
    fn model_validation() {
        let mut m = RobotModel::default();
        assert!(m.validate().is_ok());
        m.link_lengths[1] = 0.0;
        assert!(matches!(m.validate(), Err(ModelError::NonPositiveLink { index: 1, .. })));
        let mut m = RobotModel::default();
        m.joint_limits.arm[0] = Interval::new(1.0, -1.0);
        assert!(matches!(m.validate(), Err(ModelError::InvertedLimit { dof: "arm_1", .. })));
    }

    #[test]
    fn mixed_velocity_rejected() {
        let robots = vec![
            RobotConfiguration::new(0.0, 0.0, 0.0, 0.0, [0.0; 2]),
            RobotConfiguration::new(0.0, 0.0, 0.0, 0.0, [0.0; 2]).with_velocity([0.0; 2]),
        ];
        assert_eq!(SystemConfiguration::from_robots(&robots), Err(ModelError::MixedVelocity));
    }
}
