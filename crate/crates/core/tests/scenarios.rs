use std::path::PathBuf;

use mkz_core::scenarios::{generate_environment, load_scenario, save_scenario, Complexity, Scenario, ScenarioError};

fn bundled(id: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{id}.json"))
}

#[test]
fn bundled_files_match_references() {
    for s in Scenario::references() {
        let loaded = load_scenario(&bundled(&s.id)).unwrap();
        assert_eq!(loaded, s, "{}", s.id);
    }
}

#[test]
fn assembled_dimensions() {
    let expect = [("T_3", 12), ("S_3", 14), ("S_4", 30), ("I_5", 37), ("S_5", 52), ("S_6", 80)];
    for (id, l) in expect {
        assert_eq!(Scenario::reference(id).unwrap().system().unwrap().total_rows(), l, "{id}");
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::reference("I_5").unwrap().with_environment(Complexity::Medium, 9).unwrap();
    let p = dir.path().join("i5.json");
    save_scenario(&s, &p).unwrap();
    assert_eq!(load_scenario(&p).unwrap(), s);
}

#[test]
fn parse_errors_name_the_field() {
    let mut v: serde_json::Value = serde_json::from_str(&Scenario::reference("S_3").unwrap().to_json()).unwrap();
    v["environment"]["bounds"]["min"] = serde_json::json!("low");
    let err = Scenario::from_json(&v.to_string(), "bad.json").unwrap_err();
    match err {
        ScenarioError::Parse { field, .. } => assert_eq!(field, "environment.bounds.min"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn generated_environments_respect_their_band() {
    let s = Scenario::reference("S_6").unwrap();
    let keep = s.keep_clear_regions();
    for c in Complexity::ALL {
        for seed in 0..25 {
            let env = generate_environment(c, s.environment.bounds, seed, &keep).unwrap();
            assert!(c.in_band(env.clutter_ratio), "{c:?} seed {seed}: {}", env.clutter_ratio);
            assert!((env.recompute_ratio() - env.clutter_ratio).abs() < 1e-12);
            for (i, a) in env.obstacles.iter().enumerate() {
                assert!(env.bounds.contains(a));
                assert!(keep.iter().all(|k| !k.intersects(a)));
                assert!(env.obstacles[i + 1..].iter().all(|b| !a.intersects(b)));
            }
            assert_eq!(env, generate_environment(c, s.environment.bounds, seed, &keep).unwrap());
        }
    }
}

#[test]
fn reference_start_and_goal_are_valid() {
    for s in Scenario::references() {
        let sys = s.system().unwrap();
        for q in [s.start_configuration(), s.goal_configuration()] {
            assert!(sys.satisfied(&sys.eval(q.as_slice())), "{}", s.id);
            assert!(mkz_core::planner::collision_check(&s, &q).is_none(), "{}", s.id);
        }
    }
}
