use prefcbf::campaign::CampaignConfig;
use prefcbf::cbf::{conservative_baseline, issf_bound, LipschitzDomain, RobustParams};
use prefcbf::sim::{DisturbanceSpec, Rollout, SaturationMode, Scenario};

fn repo_file(rel: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn preferred() -> RobustParams {
    RobustParams::new(3.0, 0.6, 0.5, 0.015).unwrap()
}

#[test]
fn scenario_file_matches_builtin_layout() {
    let from_file = Scenario::from_json(&repo_file("scenarios/two_obstacles.json")).unwrap();
    assert_eq!(from_file, Scenario::two_obstacles());
    let env = from_file.environment.barrier_config().unwrap();
    for (t, m) in env.obstacles.iter().zip(&env.measured) {
        let err = (t.center[0] - m.center[0]).hypot(t.center[1] - m.center[1]);
        assert!(err <= env.epsilon + 1e-12);
    }
}

#[test]
fn campaign_config_file_loads() {
    let cfg = CampaignConfig::from_json(&repo_file("configs/two_obstacles.json")).unwrap();
    assert_eq!(cfg.learner.iterations, 30);
    assert_eq!(cfg.scenario, Scenario::two_obstacles());
}

#[test]
fn halving_dt_changes_min_h_by_less_than_1e4() {
    let s = Scenario::two_obstacles();
    for params in [
        preferred(),
        RobustParams::new(2.0, 0.5, 0.0651, 0.485).unwrap(),
        RobustParams::new(1.0, 0.2, 0.1, 0.05).unwrap(),
    ] {
        let coarse = s.run(&params, 0).unwrap();
        let mut fine = s.clone();
        fine.sim.dt /= 2.0;
        let fine = fine.run(&params, 0).unwrap();
        assert!(
            (coarse.min_h - fine.min_h).abs() < 1e-4,
            "{params:?}: {} vs {}",
            coarse.min_h,
            fine.min_h
        );
    }
}

#[test]
fn rollouts_are_bit_identical() {
    let s = Scenario::two_obstacles();
    let a = serde_json::to_vec(&s.run(&preferred(), 3).unwrap()).unwrap();
    let b = serde_json::to_vec(&s.run(&preferred(), 3).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn recorded_min_h_is_the_minimum_over_steps() {
    let r = Scenario::two_obstacles().run(&preferred(), 0).unwrap();
    let step_min = r
        .steps
        .iter()
        .map(|s| s.min_h)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(r.min_h, step_min);
    assert!(r.steps.windows(2).all(|w| w[0].t < w[1].t));
}

fn with_disturbance(s: &Scenario, params: &RobustParams, delta: f64) -> Rollout {
    let mut s = s.clone();
    s.sim.disturbance = DisturbanceSpec::worst_case(delta);
    s.run(params, 0).unwrap()
}

#[test]
fn issf_degradation_curve() {
    let mut s = Scenario::two_obstacles();
    s.sim.saturation = SaturationMode::Off;
    let env = s.environment.barrier_config().unwrap();
    let (alpha, phi) = (3.0, 0.6);
    let (mut a_min, mut b_min) = (0.0f64, 0.0f64);
    for (i, o) in env.obstacles.iter().enumerate() {
        let m = conservative_baseline(
            env.epsilon,
            &LipschitzDomain::around(o, 2.0, env.epsilon),
            env.zeta,
            alpha,
            phi,
            100_000,
            i as u64,
        )
        .unwrap();
        a_min = a_min.max(m.a);
        b_min = b_min.max(m.b);
    }
    let base = preferred();
    let params = RobustParams::new(alpha, phi, base.a.max(a_min), base.b.max(b_min)).unwrap();

    let mut last = f64::INFINITY;
    for delta in [0.0, 0.25, 0.5, 1.0] {
        let r = with_disturbance(&s, &params, delta);
        assert!(
            r.min_h <= last + 1e-12,
            "delta {delta}: {} after {last}",
            r.min_h
        );
        last = r.min_h;
        if delta > 0.0 && r.infeasible_step_count == 0 {
            let gamma = issf_bound(delta, &params).unwrap();
            assert!(
                r.min_h >= -gamma - 1e-3,
                "delta {delta}: {} < {}",
                r.min_h,
                -gamma
            );
        }
    }
}
