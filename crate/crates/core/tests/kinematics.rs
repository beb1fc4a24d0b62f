use std::f64::consts::PI;

use mkz_core::kinematics::{
    fk_jacobian, forward_kinematics, wrap_angle, RobotConfiguration, RobotModel, SystemConfiguration,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_config(rng: &mut impl Rng) -> RobotConfiguration {
    RobotConfiguration::new(
        rng.gen_range(-5.0..5.0),
        rng.gen_range(-5.0..5.0),
        rng.gen_range(0.0..5.0),
        rng.gen_range(-PI..PI),
        [rng.gen_range(-PI / 2.0..PI / 2.0), rng.gen_range(-PI / 2.0..PI / 2.0)],
    )
}

#[test]
fn fk_jacobian_matches_finite_differences() {
    let m = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    for _ in 0..1000 {
        let q = random_config(&mut rng);
        let j = fk_jacobian(&m, &q);
        let block = q.to_block();
        for k in 0..block.len() {
            let mut p = block.clone();
            p[k] += h;
            let fp = forward_kinematics(&m, &RobotConfiguration::from_block(&p));
            p[k] -= 2.0 * h;
            let fm = forward_kinematics(&m, &RobotConfiguration::from_block(&p));
            let dp = (fp.position - fm.position) / (2.0 * h);
            let dor = (fp.orientation - fm.orientation) / (2.0 * h);
            for r in 0..3 {
                assert!((j[(r, k)] - dp[r]).abs() <= 1e-7 + 1e-5 * dp[r].abs());
                assert!((j[(r + 3, k)] - dor[r]).abs() <= 1e-7 + 1e-5 * dor[r].abs());
            }
        }
    }
}

#[test]
fn reach_is_bounded_by_link_lengths() {
    let m = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let q = random_config(&mut rng);
        let ee = forward_kinematics(&m, &q);
        let shoulder = nalgebra::Vector3::new(q.x, q.y, q.z + m.arm_mount_offset.z);
        assert!((ee.position - shoulder).norm() <= m.link_lengths[0] + m.link_lengths[1] + 1e-12);
        assert!((ee.orientation.norm() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn wrap_lands_in_half_open_interval(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let turns = (a - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn system_configuration_round_trips(vals in proptest::collection::vec(-3.0f64..3.0, 18)) {
        let q = SystemConfiguration::from_flat(vals.clone(), 6).unwrap();
        let back = SystemConfiguration::from_robots(&q.robots()).unwrap();
        prop_assert_eq!(back.as_slice(), &vals[..]);
        let json = serde_json::to_string(&q).unwrap();
        let parsed: SystemConfiguration = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(parsed, q);
    }

    #[test]
    fn base_translation_shifts_end_effector(dx in -2.0f64..2.0, dy in -2.0f64..2.0, yaw in -PI..PI, a1 in -1.5f64..1.5) {
        let m = RobotModel::default();
        let a = forward_kinematics(&m, &RobotConfiguration::new(0.0, 0.0, 0.0, yaw, [a1, 0.2]));
        let b = forward_kinematics(&m, &RobotConfiguration::new(dx, dy, 0.0, yaw, [a1, 0.2]));
        prop_assert!((b.position - a.position - nalgebra::Vector3::new(dx, dy, 0.0)).norm() < 1e-12);
        prop_assert!((b.orientation - a.orientation).norm() < 1e-15);
    }
}
