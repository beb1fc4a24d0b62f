//! Analytic constraint Jacobian rows against central finite differences.

use mkz_core::constraints::{ConstraintSystem, ManifoldKind};
use mkz_core::scenarios::{sample_trial_configuration, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const REL: f64 = 1e-5;
const ABS: f64 = 1e-7;

/// Worst `|analytic - fd| - max(ABS, REL |fd|)` over every row and DoF;
/// non-positive means every entry is within tolerance.
fn worst_excess(sys: &ConstraintSystem, q: &[f64]) -> (f64, usize) {
    let (jac, singular) = sys.jacobian(q);
    let mut worst = f64::NEG_INFINITY;
    let mut qp = q.to_vec();
    for k in 0..q.len() {
        qp[k] = q[k] + H;
        let fp = sys.eval(&qp);
        qp[k] = q[k] - H;
        let fm = sys.eval(&qp);
        qp[k] = q[k];
        for row in 0..sys.total_rows() {
            if singular.contains(&row) {
                continue;
            }
            let fd = (fp[row] - fm[row]) / (2.0 * H);
            let excess = (jac[(row, k)] - fd).abs() - ABS.max(REL * fd.abs());
            worst = worst.max(excess);
        }
    }
    (worst, singular.len())
}

fn check_kind(id: &str, kind: ManifoldKind, velocity: bool, configs: usize, seed: u64) {
    let mut s = Scenario::reference(id).unwrap().with_manifolds(&[kind]);
    s.with_velocity = velocity;
    let sys = s.system().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut singular = 0;
    for c in 0..configs {
        let q = sample_trial_configuration(&s, &mut rng, 0.5, 3.0);
        let (excess, sing) = worst_excess(&sys, q.as_slice());
        singular += sing;
        assert!(excess <= 0.0, "{id} {kind}: config {c} exceeds tolerance by {excess:e}");
    }
    assert!(singular * 100 < configs * sys.total_rows(), "{id} {kind}: {singular} singular rows");
}

#[test]
fn m1_rows_match_finite_differences() {
    check_kind("S_3", ManifoldKind::StructureFixedDistance, false, 1000, 1);
}

#[test]
fn m2_rows_match_finite_differences() {
    // Collinear contacts exercise the cross-norm rows, the T the cosine rows.
    check_kind("S_3", ManifoldKind::StructureFixedAngle, false, 1000, 2);
    check_kind("T_3", ManifoldKind::StructureFixedAngle, false, 1000, 3);
}

#[test]
fn m3_rows_match_finite_differences() {
    check_kind("S_3", ManifoldKind::TaskFixedOrient, false, 1000, 4);
    check_kind("T_3", ManifoldKind::TaskFixedOrient, false, 1000, 5);
}

#[test]
fn m4_rows_match_finite_differences() {
    check_kind("S_3", ManifoldKind::TaskSamePlane, false, 1000, 6);
}

#[test]
fn m5_rows_match_finite_differences() {
    check_kind("S_3", ManifoldKind::RobotDiffDrive, true, 1000, 7);
}

#[test]
fn larger_teams_match_finite_differences() {
    for id in ["S_6", "I_5"] {
        let s = Scenario::reference(id).unwrap();
        let sys = s.system().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let q = sample_trial_configuration(&s, &mut rng, 0.5, 3.0);
            assert!(worst_excess(&sys, q.as_slice()).0 <= 0.0, "{id}");
        }
    }
}
