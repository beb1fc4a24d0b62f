use mkz_core::bench::{
    aggregate_planning, aggregate_projection, read_csv, run_planning_benchmark, run_projection_benchmark,
    summarize_dir, summarize_planning, summarize_projection, write_outputs, BenchResult, BenchSpec, EnvClass,
    ProjectionTrial, PROJECTION_TRIALS_CSV,
};
use mkz_core::constraints::ManifoldKind;
use mkz_core::solvers::Method;

/// One-pass mean and n-1 variance (Welford).
fn welford(xs: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in xs {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    match n {
        0.0 => None,
        1.0 => Some((mean, 0.0)),
        _ => Some((mean, (m2 / (n - 1.0)).sqrt())),
    }
}

fn small_projection() -> BenchSpec {
    BenchSpec {
        trials: 30,
        methods: vec![Method::Cnkz, Method::Nkz, Method::Cim],
        manifold_sets: vec![
            vec![ManifoldKind::StructureFixedDistance, ManifoldKind::TaskFixedOrient],
            vec![ManifoldKind::TaskFixedOrient, ManifoldKind::TaskSamePlane],
        ],
        threshold_scales: vec![1.0, 2.0],
        ..BenchSpec::projection()
    }
}

#[test]
fn aggregates_agree_with_one_pass_oracle() {
    let b = run_projection_benchmark(&small_projection()).unwrap();
    assert_eq!(b.cells.len(), 12);
    for c in &b.cells {
        let ok: Vec<&ProjectionTrial> = b
            .trials
            .iter()
            .filter(|t| t.manifolds == c.manifolds && t.method == c.method && t.threshold_scale == c.threshold_scale)
            .filter(|t| t.converged)
            .collect();
        assert_eq!(c.successes, ok.len());
        assert_eq!(c.success_rate, 100.0 * ok.len() as f64 / c.trials as f64);
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12 * b.abs().max(1.0),
            (None, None) => true,
            _ => false,
        };
        let t = welford(ok.iter().map(|t| t.wall_time_s));
        let u = welford(ok.iter().map(|t| t.updates as f64));
        assert!(close(c.mean_time_s, t.map(|p| p.0)) && close(c.std_time_s, t.map(|p| p.1)));
        assert!(close(c.mean_updates, u.map(|p| p.0)) && close(c.std_updates, u.map(|p| p.1)));
        for s in &c.residuals {
            let r = welford(ok.iter().filter_map(|t| t.manifold_mean_abs(s.kind))).unwrap();
            assert!(close(Some(s.mean), Some(r.0)) && close(Some(s.std), Some(r.1)));
        }
    }
}

#[test]
fn csv_records_rebuild_every_cell() {
    let mut spec = small_projection();
    let dir = tempfile::tempdir().unwrap();
    spec.output_dir = Some(dir.path().to_path_buf());
    let b = run_projection_benchmark(&spec).unwrap();
    write_outputs(&BenchResult::Projection(b.clone()), dir.path()).unwrap();
    let trials: Vec<ProjectionTrial> = read_csv(&dir.path().join(PROJECTION_TRIALS_CSV)).unwrap();
    assert_eq!(trials, b.trials);
    assert_eq!(aggregate_projection(&trials), b.cells);
    assert_eq!(summarize_dir(dir.path()).unwrap(), summarize_projection(&b.cells));
    assert!(dir.path().join("residual_00.svg").exists());

    // The saved spec alone reproduces the run.
    let saved: BenchSpec = serde_json::from_str(&std::fs::read_to_string(dir.path().join("spec.json")).unwrap()).unwrap();
    assert_eq!(saved, spec);
    assert_eq!(run_projection_benchmark(&saved).unwrap().without_timing(), b.without_timing());
}

#[test]
fn projection_bench_is_deterministic() {
    let spec = BenchSpec { trials: 10, jobs: Some(2), ..small_projection() };
    let a = run_projection_benchmark(&spec).unwrap();
    let b = run_projection_benchmark(&BenchSpec { jobs: Some(1), ..spec }).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
}

#[test]
fn dashes_iff_no_successes() {
    // A zero budget never converges from a random start.
    let mut spec = BenchSpec { trials: 3, methods: vec![Method::Cnkz], ..small_projection() };
    spec.solver.max_steps = 0;
    spec.threshold_scales = vec![1.0];
    let b = run_projection_benchmark(&spec).unwrap();
    assert!(b.cells.iter().all(|c| c.successes == 0 && c.mean_time_s.is_none()));
    let md = summarize_projection(&b.cells);
    let first_table = md.split("\n\n").nth(1).unwrap();
    assert_eq!(first_table.lines().skip(2).filter(|l| l.ends_with("| -- |")).count(), 2);
}

#[test]
fn single_cell_renders_one_row() {
    let spec = BenchSpec {
        trials: 2,
        methods: vec![Method::Cnkz],
        manifold_sets: vec![vec![ManifoldKind::StructureFixedDistance]],
        ..BenchSpec::projection()
    };
    let b = run_projection_benchmark(&spec).unwrap();
    let md = summarize_projection(&b.cells);
    let table = md.split("\n\n").nth(1).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn planning_bench_baseline_and_audit() {
    let spec = BenchSpec {
        scenarios: vec!["S_3".into()],
        env_classes: vec![EnvClass::Empty, EnvClass::Low],
        trials: 3,
        ..BenchSpec::planning()
    };
    let b = run_planning_benchmark(&spec).unwrap();
    assert_eq!(b.runs.len(), 12);
    let empty = b.cell("S_3", EnvClass::Empty, Method::Cnkz).unwrap();
    assert_eq!(empty.success_rate, 100.0);
    assert!(b.runs.iter().all(|r| r.audit_violations == 0 && r.error.is_none()));
    assert_eq!(aggregate_planning(&b.runs), b.cells);
    let again = run_planning_benchmark(&spec).unwrap();
    assert_eq!(b.without_timing(), again.without_timing());
    assert!(summarize_planning(&b.cells).contains("| S_3 | 14 | Low |"));
}
