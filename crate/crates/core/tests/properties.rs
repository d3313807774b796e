use nalgebra::{DMatrix, DVector};
use prefcbf::cbf::{
    barrier, robust_constraints, trop_filter, ControlInput, InputBox, Obstacle, RobustParams,
    UnicycleState,
};
use prefcbf::grid::{Dimension, Grid, GridSpec};
use prefcbf::utility::{
    laplace_map, neg_log_posterior, prior_covariance, Category, FeedbackDataset, KernelConfig,
    LikelihoodConfig, LocalFeedback, ModelConfig, OrdinalLabel, Preference,
};
use proptest::prelude::*;

fn obstacle() -> impl Strategy<Value = Obstacle> {
    ((-1.0..1.0f64), (-1.0..1.0f64), (0.2..0.5f64))
        .prop_map(|(x, y, r)| Obstacle::new([x, y], r).unwrap())
}

fn params() -> impl Strategy<Value = RobustParams> {
    ((0.5..5.0f64), (0.0..1.0f64), (0.0..0.5f64), (0.0..0.3f64))
        .prop_map(|(al, ph, a, b)| RobustParams::new(al, ph, a, b).unwrap())
}

fn state() -> impl Strategy<Value = UnicycleState> {
    ((-1.5..1.5f64), (-1.5..1.5f64), (-3.1..3.1f64))
        .prop_map(|(x, y, p)| UnicycleState::new(x, y, p))
}

fn input() -> impl Strategy<Value = ControlInput> {
    ((-0.5..0.6f64), (-0.8..0.8f64)).prop_map(|(v, w)| ControlInput::new(v, w))
}

fn clear_of(x: &UnicycleState, obs: &[Obstacle]) -> bool {
    obs.iter().all(|o| barrier(x, o, 0.2).unwrap() > 0.0)
}

/// Smallest robust-constraint slack of `u` over the obstacles.
fn min_slack(x: &UnicycleState, obs: &[Obstacle], p: &RobustParams, u: ControlInput) -> f64 {
    robust_constraints(x, obs, 0.2, p)
        .unwrap()
        .iter()
        .map(|c| c.slack(u.as_array()))
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn feasible_output_satisfies_every_constraint(
        x in state(),
        obs in prop::collection::vec(obstacle(), 1..4),
        p in params(),
        k in input(),
        boxed in any::<bool>(),
    ) {
        prop_assume!(clear_of(&x, &obs));
        let bx = InputBox::default();
        let out = trop_filter(&x, &obs, 0.2, &p, k, boxed.then_some(&bx)).unwrap();
        if let Some(u) = out.input() {
            let scale = robust_constraints(&x, &obs, 0.2, &p).unwrap().iter()
                .map(|c| c.a[0].hypot(c.a[1]) + c.b + c.c.abs()).fold(1.0, f64::max);
            prop_assert!(min_slack(&x, &obs, &p, u) >= -1e-8 * scale);
            if boxed {
                prop_assert!(bx.contains(bx.saturate(u)));
                prop_assert!((bx.saturate(u).v - u.v).abs() < 1e-9);
                prop_assert!((bx.saturate(u).omega - u.omega).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn larger_margins_never_increase_slack(
        x in state(),
        obs in prop::collection::vec(obstacle(), 1..4),
        p in params(),
        k in input(),
        which in 0usize..3,
        bump in 0.01..0.5f64,
    ) {
        prop_assume!(clear_of(&x, &obs));
        let mut q = p;
        match which {
            0 => q.a += bump,
            1 => q.b += bump,
            _ => q.phi += bump,
        }
        let loose = trop_filter(&x, &obs, 0.2, &p, k, None).unwrap();
        let tight = trop_filter(&x, &obs, 0.2, &q, k, None).unwrap();
        if let (Some(u1), Some(u2)) = (loose.input(), tight.input()) {
            let s1 = min_slack(&x, &obs, &p, u1);
            let s2 = min_slack(&x, &obs, &q, u2);
            prop_assert!(s2 <= s1 + 1e-7, "slack {s2} > {s1}");
        }
        if loose.input().is_none() {
            prop_assert!(tight.input().is_none());
        }
    }

    #[test]
    fn larger_a_shrinks_the_feasible_set(
        x in state(),
        obs in prop::collection::vec(obstacle(), 1..4),
        p in params(),
        bump in 0.01..0.5f64,
        samples in prop::collection::vec(input(), 64),
    ) {
        prop_assume!(clear_of(&x, &obs));
        let mut q = p;
        q.a += bump;
        for u in samples {
            if min_slack(&x, &obs, &q, u) >= 0.0 {
                prop_assert!(min_slack(&x, &obs, &p, u) >= 0.0);
            }
        }
    }

    #[test]
    fn zero_margins_reduce_to_the_standard_qp(
        x in state(),
        o in obstacle(),
        alpha in 0.5..5.0f64,
        k in input(),
    ) {
        prop_assume!(clear_of(&x, std::slice::from_ref(&o)));
        let p = RobustParams::new(alpha, 0.0, 0.0, 0.0).unwrap();
        let out = trop_filter(&x, std::slice::from_ref(&o), 0.2, &p, k, None).unwrap();
        let u = out.input().unwrap();

        // h-dot along the unicycle flow, from central differences of h
        let h = |s: UnicycleState| barrier(&s, &o, 0.2).unwrap();
        let e = 1e-6;
        let dx = (h(UnicycleState::new(x.x + e, x.y, x.psi)) - h(UnicycleState::new(x.x - e, x.y, x.psi))) / (2.0 * e);
        let dy = (h(UnicycleState::new(x.x, x.y + e, x.psi)) - h(UnicycleState::new(x.x, x.y - e, x.psi))) / (2.0 * e);
        let dp = (h(UnicycleState::new(x.x, x.y, x.psi + e)) - h(UnicycleState::new(x.x, x.y, x.psi - e))) / (2.0 * e);
        let a = [dx * x.psi.cos() + dy * x.psi.sin(), dp];
        let rhs = -alpha * h(x);
        let lhs = a[0] * k.v + a[1] * k.omega;
        let expected = if lhs >= rhs {
            k
        } else {
            let t = (rhs - lhs) / (a[0] * a[0] + a[1] * a[1]);
            ControlInput::new(k.v + t * a[0], k.omega + t * a[1])
        };
        prop_assert!((u.v - expected.v).abs() < 1e-5, "{u:?} vs {expected:?}");
        prop_assert!((u.omega - expected.omega).abs() < 1e-5, "{u:?} vs {expected:?}");
    }

    #[test]
    fn a_new_preference_widens_the_gap(seed in 0u64..1000, pick in any::<(usize, usize)>()) {
        let (grid, subset, mut data) = instance(seed);
        let (i, j) = (subset[pick.0 % subset.len()], subset[pick.1 % subset.len()]);
        prop_assume!(i != j);
        let model = ModelConfig::new(KernelConfig::isotropic(2, 1.5), LikelihoodConfig::default());
        let pos = |a: usize| subset.iter().position(|&s| s == a).unwrap();
        let before = laplace_map(&grid, &subset, &data, &model).unwrap();
        data.preferences.push(Preference { preferred: i, other: j });
        let after = laplace_map(&grid, &subset, &data, &model).unwrap();
        let gap = |m: &DVector<f64>| m[pos(i)] - m[pos(j)];
        prop_assert!(gap(&after.mean) > gap(&before.mean));
    }

    #[test]
    fn newton_minimizer_is_start_independent(
        seed in 0u64..1000,
        starts in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 8), 3),
    ) {
        let (grid, subset, data) = instance(seed);
        let model = ModelConfig::new(KernelConfig::isotropic(2, 1.5), LikelihoodConfig::default());
        let post = laplace_map(&grid, &subset, &data, &model).unwrap();
        let points: Vec<Vec<f64>> = subset.iter().map(|&i| grid.normalized(i).unwrap()).collect();
        let kinv = prior_covariance(&points, &model.kernel, model.jitter).unwrap().try_inverse().unwrap();
        let local = LocalFeedback::new(&subset, &data).unwrap();
        for start in starts {
            let r = newton(DVector::from_iterator(subset.len(), start.into_iter().take(subset.len())), &local, &kinv);
            let gap = (&r - &post.mean).amax();
            prop_assert!(gap < 1e-6, "gap {gap}");
        }
    }

    #[test]
    fn feedback_shrinks_marginal_variance(seed in 0u64..1000) {
        let (grid, subset, data) = instance(seed);
        let model = ModelConfig::new(KernelConfig::isotropic(2, 1.5), LikelihoodConfig::default());
        let post = laplace_map(&grid, &subset, &data, &model).unwrap();
        let prior = laplace_map(&grid, &subset, &FeedbackDataset::default(), &model).unwrap();
        for i in 0..subset.len() {
            prop_assert!(post.covariance[(i, i)] <= prior.covariance[(i, i)] + 1e-9);
        }
    }
}

fn instance(seed: u64) -> (Grid, Vec<usize>, FeedbackDataset) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(GridSpec {
        dimensions: vec![
            Dimension::new("u", 0.0, 5.0, 1.0),
            Dimension::new("w", 0.0, 5.0, 1.0),
        ],
    })
    .unwrap();
    let n = rng.random_range(2..=8);
    let subset = rand::seq::index::sample(&mut rng, grid.len(), n).into_vec();
    let mut data = FeedbackDataset::default();
    for _ in 0..rng.random_range(1..=10) {
        let i = subset[rng.random_range(0..n)];
        let j = subset[rng.random_range(0..n)];
        if i != j && rng.random_bool(0.6) {
            data.preferences.push(Preference {
                preferred: i,
                other: j,
            });
        } else {
            data.ordinals.push(OrdinalLabel {
                action: i,
                category: if rng.random_bool(0.5) {
                    Category::Safe
                } else {
                    Category::Unsafe
                },
            });
        }
    }
    (grid, subset, data)
}

/// Damped Newton iteration on the objective, independent of the library's solver loop.
fn newton(mut r: DVector<f64>, data: &LocalFeedback, kinv: &DMatrix<f64>) -> DVector<f64> {
    let lik = LikelihoodConfig::default();
    for _ in 0..500 {
        let obj = neg_log_posterior(&r, data, kinv, &lik);
        if obj.gradient.amax() < 1e-10 {
            break;
        }
        let step = obj.hessian.clone().cholesky().unwrap().solve(&obj.gradient);
        let mut t = 1.0;
        while t > 1e-12 {
            let trial = &r - &step * t;
            if neg_log_posterior(&trial, data, kinv, &lik).value < obj.value {
                r = trial;
                break;
            }
            t *= 0.5;
        }
        if t <= 1e-12 {
            break;
        }
    }
    r
}
