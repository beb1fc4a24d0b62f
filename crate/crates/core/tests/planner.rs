use std::f64::consts::PI;

use mkz_core::planner::{
    audit_path, configuration_metric, interpolate, path_export, plan, plan_scenario, PathFile, PlanError,
    PlannerParams,
};
use mkz_core::scenarios::{Complexity, Scenario};
use mkz_core::solvers::Method;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(seed: u64) -> PlannerParams {
    PlannerParams { rng_seed: seed, ..PlannerParams::default() }
}

#[test]
fn metric_is_symmetric_and_obeys_triangle_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..24).map(|k| if k % 8 == 3 { rng.gen_range(-PI..PI) } else { rng.gen_range(-2.0..2.0) }).collect()
    };
    for _ in 0..10_000 {
        let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let ab = configuration_metric(&a, &b, 8);
        assert_eq!(ab, configuration_metric(&b, &a, 8));
        assert!(configuration_metric(&a, &c, 8) <= ab + configuration_metric(&b, &c, 8) + 1e-12);
        assert_eq!(configuration_metric(&a, &a, 8), 0.0);
    }
}

#[test]
fn interpolation_endpoints() {
    let a = [0.0, 1.0, 2.0, 3.0, 0.1, -0.1];
    let b = [1.0, 0.0, 2.5, -3.0, 0.2, 0.3];
    assert_eq!(interpolate(&a, &b, 0.0, 6), a.to_vec());
    let end = interpolate(&a, &b, 1.0, 6);
    assert!(configuration_metric(&end, &b, 6) < 1e-12);
}

#[test]
fn start_equal_to_goal_is_a_one_node_path() {
    let s = Scenario::reference("S_3").unwrap();
    let q = s.start_configuration();
    let r = plan(&s, &q, &q, &params(0)).unwrap();
    assert!(r.success);
    assert_eq!(r.path, vec![0]);
    assert_eq!(r.nodes.len(), 1);
}

#[test]
fn vanilla_rrt_solves_an_empty_world() {
    let mut s = Scenario::reference("S_3").unwrap();
    s.manifolds.clear();
    let p = PlannerParams { projection: false, ..params(3) };
    let r = plan_scenario(&s, &p).unwrap();
    assert!(r.success);
    assert_eq!(r.stats.projections_attempted, 0);
}

#[test]
fn empty_world_translation_succeeds() {
    let s = Scenario::reference("S_3").unwrap();
    let ok = (0..20).filter(|&seed| plan_scenario(&s, &params(seed)).unwrap().success).count();
    assert!(ok >= 19, "{ok}/20");
}

#[test]
fn success_is_monotone_in_node_budget() {
    let s = Scenario::reference("S_3").unwrap().with_environment(Complexity::Hard, 4).unwrap();
    for seed in 0..4 {
        let mut succeeded = false;
        for budget in [50, 150, 400, 1000] {
            let r = plan_scenario(&s, &PlannerParams { max_nodes: budget, ..params(seed) }).unwrap();
            assert!(r.nodes.len() <= budget);
            assert!(r.success || !succeeded, "seed {seed}: budget {budget} lost a success");
            succeeded |= r.success;
        }
    }
}

#[test]
fn plans_are_deterministic() {
    let s = Scenario::reference("T_3").unwrap().with_environment(Complexity::Medium, 2).unwrap();
    for method in [Method::Cnkz, Method::Nkz] {
        let mut p = params(7);
        p.projection_solver.method = method;
        let a = plan_scenario(&s, &p).unwrap();
        let b = plan_scenario(&s, &p).unwrap();
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.path, b.path);
        assert_eq!(a.stats.without_timing(), b.stats.without_timing());
    }
}

#[test]
fn exported_path_round_trips_and_re_verifies() {
    let s = Scenario::reference("S_4").unwrap().with_environment(Complexity::Low, 1).unwrap();
    let p = params(1);
    let r = plan_scenario(&s, &p).unwrap();
    assert!(r.success);
    let file = path_export(&s, &r, &p).unwrap();
    assert_eq!(file.waypoints.len(), r.path.len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("path.json");
    file.write(&path).unwrap();
    let back = PathFile::read(&path).unwrap();
    assert_eq!(back, file);

    // Fresh system, fresh evaluation: every row within its threshold and equal
    // to the recorded residual.
    let sys = s.system().unwrap();
    for w in &back.waypoints {
        let r = sys.eval_residual(&w.robots).unwrap();
        assert_eq!(r.unweighted, w.residual);
        for (v, eps) in r.weighted.iter().zip(sys.threshold_vector()) {
            assert!(v.abs() <= *eps);
        }
    }
    let configs: Vec<_> = back.waypoints.iter().map(|w| w.robots.clone()).collect();
    assert_eq!(audit_path(&s, &configs).unwrap(), vec![]);
    assert_eq!(configs.first(), Some(&s.start_configuration()));
    assert_eq!(configs.last(), Some(&s.goal_configuration()));
}

#[test]
fn colliding_goal_is_rejected_before_search() {
    let mut s = Scenario::reference("S_3").unwrap();
    let g = s.goal.position;
    s.environment.obstacles.push(mkz_core::geometry::Aabb::from_center(g, nalgebra::Vector3::repeat(0.3)));
    let err = plan_scenario(&s, &params(0)).unwrap_err();
    assert!(matches!(err, PlanError::InvalidGoal(_)), "{err}");
}

#[test]
fn rejects_bad_parameters() {
    let s = Scenario::reference("S_3").unwrap();
    for p in [
        PlannerParams { goal_bias: 1.5, ..params(0) },
        PlannerParams { steer_step: 0.0, ..params(0) },
        PlannerParams { max_nodes: 0, ..params(0) },
    ] {
        assert!(matches!(plan_scenario(&s, &p), Err(PlanError::Params(_))));
    }
}
