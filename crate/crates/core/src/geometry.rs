//! Boxes, capsules and rigid point-set fitting.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn from_center(center: Vector3<f64>, half: Vector3<f64>) -> Self {
        Self { min: center - half, max: center + half }
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        (self.max - self.min) * 0.5
    }

    pub fn volume(&self) -> f64 {
        let d = self.max - self.min;
        d.x.max(0.0) * d.y.max(0.0) * d.z.max(0.0)
    }

    pub fn contains_point(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    /// Closed-set overlap test.
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    pub fn inflate(&self, r: f64) -> Aabb {
        let d = Vector3::repeat(r);
        Aabb { min: self.min - d, max: self.max + d }
    }

    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2.sqrt()
    }
}

/// Oriented box; `rotation` maps box-frame vectors to world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obb {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Obb {
    pub fn from_aabb(b: &Aabb) -> Self {
        Self { center: b.center(), half_extents: b.half_extents(), rotation: Matrix3::identity() }
    }

    pub fn yawed(center: Vector3<f64>, half_extents: Vector3<f64>, yaw: f64) -> Self {
        Self { center, half_extents, rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix() }
    }

    /// World-frame bounding box.
    pub fn bounds(&self) -> Aabb {
        let r = self.rotation.abs() * self.half_extents;
        Aabb::from_center(self.center, r)
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.center))
    }

    pub fn contains_point(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_local(p);
        (0..3).all(|i| l[i].abs() <= self.half_extents[i])
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        for (k, c) in out.iter_mut().enumerate() {
            let s = Vector3::new(
                if k & 1 == 0 { -1.0 } else { 1.0 },
                if k & 2 == 0 { -1.0 } else { 1.0 },
                if k & 4 == 0 { -1.0 } else { 1.0 },
            );
            *c = self.center + self.rotation * s.component_mul(&self.half_extents);
        }
        out
    }
}

/// Separating-axis test over the 15 candidate axes. Touching counts as overlap.
pub fn obb_intersects(a: &Obb, b: &Obb) -> bool {
    let r = a.rotation.tr_mul(&b.rotation);
    let t = a.rotation.tr_mul(&(b.center - a.center));
    let abs_r = r.abs().add_scalar(1e-12);
    let (ea, eb) = (a.half_extents, b.half_extents);
    for i in 0..3 {
        let ra = ea[i];
        let rb = eb[0] * abs_r[(i, 0)] + eb[1] * abs_r[(i, 1)] + eb[2] * abs_r[(i, 2)];
        if t[i].abs() > ra + rb {
            return false;
        }
    }
    for j in 0..3 {
        let ra = ea[0] * abs_r[(0, j)] + ea[1] * abs_r[(1, j)] + ea[2] * abs_r[(2, j)];
        let rb = eb[j];
        let tj = t[0] * r[(0, j)] + t[1] * r[(1, j)] + t[2] * r[(2, j)];
        if tj.abs() > ra + rb {
            return false;
        }
    }
    for i in 0..3 {
        let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
        for j in 0..3 {
            let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
            let ra = ea[i1] * abs_r[(i2, j)] + ea[i2] * abs_r[(i1, j)];
            let rb = eb[j1] * abs_r[(i, j2)] + eb[j2] * abs_r[(i, j1)];
            let tv = t[i2] * r[(i1, j)] - t[i1] * r[(i2, j)];
            if tv.abs() > ra + rb {
                return false;
            }
        }
    }
    true
}

/// Segment from `a` to `b` swept by a sphere of `radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn bounds(&self) -> Aabb {
        Aabb::new(self.a.inf(&self.b), self.a.sup(&self.b)).inflate(self.radius)
    }
}

/// Distance between a segment and a box, by ternary search on the convex
/// point-to-box distance along the segment.
pub fn segment_aabb_distance(a: &Vector3<f64>, b: &Vector3<f64>, aabb: &Aabb) -> f64 {
    let f = |t: f64| aabb.distance_to_point(&(a + (b - a) * t));
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    f(0.5 * (lo + hi)).min(f(0.0)).min(f(1.0))
}

pub fn capsule_aabb_intersects(c: &Capsule, aabb: &Aabb) -> bool {
    if !c.bounds().intersects(aabb) {
        return false;
    }
    segment_aabb_distance(&c.a, &c.b, aabb) <= c.radius
}

pub fn capsule_obb_intersects(c: &Capsule, obb: &Obb) -> bool {
    if !c.bounds().intersects(&obb.bounds()) {
        return false;
    }
    let local = Aabb::from_center(Vector3::zeros(), obb.half_extents);
    segment_aabb_distance(&obb.to_local(&c.a), &obb.to_local(&c.b), &local) <= c.radius
}

/// Least-squares rigid transform `dst ~ R src + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidFit {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Largest point residual `|R src_i + t - dst_i|`.
    pub max_error: f64,
}

impl RigidFit {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Heading of the fitted body x axis in the world x-y plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

/// Kabsch fit. A lightly weighted pair of points above the centroids pins
/// the roll of collinear point sets to the world vertical.
pub fn fit_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> RigidFit {
    assert_eq!(src.len(), dst.len());
    assert!(!src.is_empty());
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    h += 1e-3 * Vector3::z() * Vector3::z().transpose();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = v_t.transpose() * d * u.transpose();
    let translation = cd - rotation * cs;
    let max_error = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (rotation * s + translation - d).norm())
        .fold(0.0, f64::max);
    RigidFit { rotation, translation, max_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn aabb_basics() {
        let a = Aabb::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(a.volume(), 6.0);
        assert!(a.contains_point(&Vector3::new(0.5, 1.0, 1.0)));
        assert!(a.intersects(&Aabb::new(Vector3::repeat(1.0), Vector3::repeat(2.0))));
        assert!(!a.intersects(&Aabb::new(Vector3::repeat(3.5), Vector3::repeat(4.0))));
        assert!((a.distance_to_point(&Vector3::new(2.0, 1.0, 1.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sat_rotated_boxes() {
        let a = Obb::yawed(Vector3::zeros(), Vector3::repeat(0.5), 0.0);
        // Rotated by 45 degrees, its corner reaches sqrt(2)/2 along x.
        let b = Obb::yawed(Vector3::new(1.2, 0.0, 0.0), Vector3::repeat(0.5), PI / 4.0);
        assert!(obb_intersects(&a, &b));
        let b = Obb::yawed(Vector3::new(1.25, 0.0, 0.0), Vector3::repeat(0.5), PI / 4.0);
        assert!(!obb_intersects(&a, &b));
        let c = Obb::yawed(Vector3::new(1.05, 0.0, 0.0), Vector3::repeat(0.5), 0.0);
        assert!(!obb_intersects(&a, &c));
    }

    #[test]
    fn segment_distance() {
        let b = Aabb::new(Vector3::zeros(), Vector3::repeat(1.0));
        let d = segment_aabb_distance(&Vector3::new(-1.0, 2.0, 0.5), &Vector3::new(2.0, 2.0, 0.5), &b);
        assert!((d - 1.0).abs() < 1e-9);
        let d = segment_aabb_distance(&Vector3::new(-1.0, 0.5, 0.5), &Vector3::new(2.0, 0.5, 0.5), &b);
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn kabsch_recovers_pose() {
        let src = vec![Vector3::new(-0.5, 0.0, 0.0), Vector3::new(0.5, 0.0, 0.0), Vector3::new(0.0, -0.5, 0.0)];
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.7);
        let t = Vector3::new(3.0, -1.0, 2.0);
        let dst: Vec<_> = src.iter().map(|p| rot * p + t).collect();
        let fit = fit_rigid(&src, &dst);
        assert!(fit.max_error < 1e-9);
        assert!((fit.yaw() - 0.7).abs() < 1e-9);
    }

    #[test]
    fn kabsch_collinear_keeps_upright() {
        let src: Vec<_> = (0..3).map(|i| Vector3::new(0.5 * i as f64, 0.0, 0.0)).collect();
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), -1.2);
        let dst: Vec<_> = src.iter().map(|p| rot * p + Vector3::new(1.0, 1.0, 1.0)).collect();
        let fit = fit_rigid(&src, &dst);
        assert!(fit.max_error < 1e-9);
        assert!((fit.rotation * Vector3::z() - Vector3::z()).norm() < 1e-9);
    }
}
