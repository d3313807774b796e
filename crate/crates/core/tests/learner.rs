use std::sync::Arc;

use prefcbf::grid::{Dimension, Grid, GridSpec};
use prefcbf::learner::{Learner, LearnerConfig};
use prefcbf::oracle::{
    draw_truth, run_campaign, OracleProvider, SyntheticCampaignConfig, SyntheticTruth,
};
use prefcbf::utility::{KernelConfig, LikelihoodConfig, ModelConfig};

fn line_grid(n: usize) -> Arc<Grid> {
    Arc::new(
        Grid::new(GridSpec {
            dimensions: vec![Dimension::new("u", 0.0, (n - 1) as f64, 1.0)],
        })
        .unwrap(),
    )
}

#[test]
fn noiseless_oracle_finds_the_argmax_on_a_line() {
    let grid = line_grid(20);
    let model = ModelConfig::new(KernelConfig::isotropic(1, 2.0), LikelihoodConfig::default());
    let exact = LikelihoodConfig {
        pref_noise: 1e-6,
        ordinal_noise: 1e-6,
        threshold: 0.0,
    };
    for (seed, peak) in [0usize, 3, 9, 14, 19].into_iter().enumerate() {
        // single smooth bump, so the argmax is known by construction
        let utilities: Vec<f64> = (0..20)
            .map(|i| 1.0 - ((i as f64 - peak as f64) / 6.0).powi(2))
            .collect();
        let truth = Arc::new(SyntheticTruth {
            utilities,
            best: peak,
            seed: 0,
        });
        for lambda in [None, Some(-0.5)] {
            let learner = Learner::new(
                grid.clone(),
                model.clone(),
                LearnerConfig {
                    actions_per_iteration: 2,
                    iterations: 10,
                    roi_lambda: lambda,
                    line_size: 20,
                    seed: seed as u64,
                },
            )
            .unwrap();
            let mut oracle = OracleProvider {
                truth: truth.clone(),
                likelihood: exact,
                seed: seed as u64,
            };
            let mut state = learner.start(&mut oracle).unwrap();
            while state.iteration < 10 {
                state = learner.step(&state, &mut oracle).unwrap();
            }
            let (best, _) = learner.believed_best(&state).unwrap();
            assert_eq!(best, peak, "lambda {lambda:?}");
        }
    }
}

#[test]
fn visited_set_grows_and_deployments_stay_in_the_roi() {
    let grid = line_grid(30);
    let model = ModelConfig::new(KernelConfig::isotropic(1, 2.0), LikelihoodConfig::default());
    let truth = Arc::new(draw_truth(&grid, &model.kernel, model.jitter, 5).unwrap());
    let learner = Learner::new(
        grid,
        model.clone(),
        LearnerConfig {
            actions_per_iteration: 3,
            iterations: 15,
            roi_lambda: Some(-0.5),
            line_size: 25,
            seed: 5,
        },
    )
    .unwrap();
    let mut oracle = OracleProvider {
        truth,
        likelihood: model.likelihood,
        seed: 5,
    };
    let mut state = learner.start(&mut oracle).unwrap();
    while state.iteration < 15 {
        let prev = state.clone();
        state = learner.step(&prev, &mut oracle).unwrap();
        assert!(state.visited.starts_with(&prev.visited));
        let record = state.history.last().unwrap();
        if !record.roi_fallback {
            assert!(record.deployed.iter().all(|d| record.roi.contains(d)));
        }
        assert!(record.deployed.iter().all(|d| state.visited.contains(d)));
    }
}

#[test]
fn prediction_error_falls_on_average() {
    let stats = run_campaign(&SyntheticCampaignConfig::default()).unwrap();
    for series in &stats {
        let pe: Vec<f64> = series.prediction_error.iter().map(|m| m.mean).collect();
        let n = pe.len() as f64;
        let tbar = (n - 1.0) / 2.0;
        let ybar = pe.iter().sum::<f64>() / n;
        let slope = pe
            .iter()
            .enumerate()
            .map(|(t, y)| (t as f64 - tbar) * (y - ybar))
            .sum::<f64>()
            / pe.iter()
                .enumerate()
                .map(|(t, _)| (t as f64 - tbar).powi(2))
                .sum::<f64>();
        assert!(slope <= 0.0, "{}: slope {slope}", series.label());
        assert!(pe[pe.len() - 1] <= pe[0], "{}: {pe:?}", series.label());
    }
}
