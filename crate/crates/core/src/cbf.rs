//! Barrier function, robustified safety filter and related bounds for the
//! unicycle `x' = g(x)(u + d)` with state `(x, y, psi)` and input `(v, omega)`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Action;
use crate::rng::{stream_rng, Stream};
use crate::socp::{self, ConeConstraint, SocpOutcome};

const MIN_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    pub fn new(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::config(
                "obstacle",
                "radius must be positive and center finite",
            ));
        }
        Ok(Self { center, radius })
    }

    pub fn shifted(&self, shift: [f64; 2]) -> Self {
        Self {
            center: [self.center[0] + shift[0], self.center[1] + shift[1]],
            radius: self.radius,
        }
    }
}

/// True and measured obstacle lists plus the heading weight `zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierConfig {
    pub zeta: f64,
    pub obstacles: Vec<Obstacle>,
    pub measured: Vec<Obstacle>,
    pub epsilon: f64,
}

impl BarrierConfig {
    /// Exact measurements.
    pub fn exact(zeta: f64, obstacles: Vec<Obstacle>) -> Result<Self> {
        Self::with_shift(zeta, obstacles, [0.0, 0.0])
    }

    /// Every measured center is the true center plus `shift`.
    pub fn with_shift(zeta: f64, obstacles: Vec<Obstacle>, shift: [f64; 2]) -> Result<Self> {
        let measured = obstacles.iter().map(|o| o.shifted(shift)).collect();
        let cfg = Self {
            zeta,
            obstacles,
            measured,
            epsilon: shift[0].hypot(shift[1]),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0) {
            return Err(Error::config("zeta", "must be positive"));
        }
        if self.obstacles.len() != self.measured.len() {
            return Err(Error::config("measured", "length differs from obstacles"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::config("epsilon", "must be non-negative"));
        }
        for (i, (o, m)) in self.obstacles.iter().zip(&self.measured).enumerate() {
            if !(o.radius > 0.0) || !(m.radius > 0.0) {
                return Err(Error::config(
                    format!("obstacles[{i}].radius"),
                    "must be positive",
                ));
            }
            let err = (o.center[0] - m.center[0]).hypot(o.center[1] - m.center[1]);
            if err > self.epsilon + 1e-12 {
                return Err(Error::config(
                    format!("measured[{i}]"),
                    format!("measurement error {err} exceeds epsilon {}", self.epsilon),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustParams {
    pub alpha: f64,
    pub phi: f64,
    pub a: f64,
    pub b: f64,
}

impl RobustParams {
    pub fn new(alpha: f64, phi: f64, a: f64, b: f64) -> Result<Self> {
        let p = Self { alpha, phi, a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        for (name, v) in [("phi", self.phi), ("a", self.a), ("b", self.b)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn from_action(action: &Action) -> Result<Self> {
        Self::new(action.alpha(), action.phi(), action.a(), action.b())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnicycleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl UnicycleState {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }
}

/// Wraps to (-pi, pi].
pub fn wrap_angle(psi: f64) -> f64 {
    let mut w = psi.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub omega: f64,
}

impl ControlInput {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.v, self.omega]
    }

    pub fn norm(&self) -> f64 {
        self.v.hypot(self.omega)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub v: [f64; 2],
    pub omega: [f64; 2],
}

impl Default for InputBox {
    fn default() -> Self {
        Self {
            v: [-0.2, 0.3],
            omega: [-0.4, 0.4],
        }
    }
}

impl InputBox {
    pub fn saturate(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            v: u.v.clamp(self.v[0], self.v[1]),
            omega: u.omega.clamp(self.omega[0], self.omega[1]),
        }
    }

    pub fn contains(&self, u: ControlInput) -> bool {
        (self.v[0]..=self.v[1]).contains(&u.v) && (self.omega[0]..=self.omega[1]).contains(&u.omega)
    }

    fn constraints(&self) -> [ConeConstraint; 4] {
        [
            ConeConstraint::new([1.0, 0.0], 0.0, self.v[0]),
            ConeConstraint::new([-1.0, 0.0], 0.0, -self.v[1]),
            ConeConstraint::new([0.0, 1.0], 0.0, self.omega[0]),
            ConeConstraint::new([0.0, -1.0], 0.0, -self.omega[1]),
        ]
    }
}

struct Geometry {
    dx: f64,
    dy: f64,
    d: f64,
    theta: f64,
}

fn geometry(x: &UnicycleState, center: [f64; 2]) -> Result<Geometry> {
    let dx = center[0] - x.x;
    let dy = center[1] - x.y;
    let d = dx.hypot(dy);
    if d < MIN_DISTANCE {
        return Err(Error::DegenerateGeometry("robot at obstacle center"));
    }
    Ok(Geometry {
        dx,
        dy,
        d,
        theta: dy.atan2(dx),
    })
}

/// `h = d - r - zeta cos(psi - theta)`.
pub fn barrier(x: &UnicycleState, obstacle: &Obstacle, zeta: f64) -> Result<f64> {
    let g = geometry(x, obstacle.center)?;
    Ok(g.d - obstacle.radius - zeta * (x.psi - g.theta).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LieDerivatives {
    pub lf: f64,
    pub lg: [f64; 2],
}

impl LieDerivatives {
    pub fn lg_norm_squared(&self) -> f64 {
        self.lg[0] * self.lg[0] + self.lg[1] * self.lg[1]
    }
}

pub fn lie_derivatives(
    x: &UnicycleState,
    obstacle: &Obstacle,
    zeta: f64,
) -> Result<LieDerivatives> {
    let g = geometry(x, obstacle.center)?;
    let s = (x.psi - g.theta).sin();
    let d2 = g.d * g.d;
    let dh_dx = -g.dx / g.d - zeta * s * g.dy / d2;
    let dh_dy = -g.dy / g.d + zeta * s * g.dx / d2;
    let dh_dpsi = zeta * s;
    Ok(LieDerivatives {
        lf: 0.0,
        lg: [dh_dx * x.psi.cos() + dh_dy * x.psi.sin(), dh_dpsi],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NominalGains {
    pub k_v: f64,
    pub k_omega: f64,
    pub c: f64,
}

impl Default for NominalGains {
    fn default() -> Self {
        Self {
            k_v: 0.5,
            k_omega: 1.0,
            c: 0.1,
        }
    }
}

pub fn nominal_controller(x: &UnicycleState, goal: [f64; 2], gains: &NominalGains) -> ControlInput {
    let dg = (goal[0] - x.x).hypot(goal[1] - x.y);
    if dg < MIN_DISTANCE {
        return ControlInput::default();
    }
    ControlInput {
        v: gains.k_v * dg + gains.c,
        omega: -gains.k_omega * (x.psi.sin() - (goal[1] - x.y) / dg),
    }
}

/// Conic constraint `A v - b |v| >= c` for one measured obstacle.
pub fn robust_constraint(
    x: &UnicycleState,
    obstacle: &Obstacle,
    zeta: f64,
    params: &RobustParams,
) -> Result<ConeConstraint> {
    let h = barrier(x, obstacle, zeta)?;
    let lie = lie_derivatives(x, obstacle, zeta)?;
    let c = -params.alpha * h - lie.lf + params.phi * lie.lg_norm_squared() + params.a;
    Ok(ConeConstraint::new(lie.lg, params.b, c))
}

pub fn robust_constraints(
    x: &UnicycleState,
    obstacles: &[Obstacle],
    zeta: f64,
    params: &RobustParams,
) -> Result<Vec<ConeConstraint>> {
    obstacles
        .iter()
        .map(|o| robust_constraint(x, o, zeta, params))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FilterStatus {
    /// Nominal input already satisfied every constraint.
    Nominal,
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterOutcome {
    Feasible {
        input: ControlInput,
        status: FilterStatus,
    },
    Infeasible,
}

impl FilterOutcome {
    pub fn input(&self) -> Option<ControlInput> {
        match self {
            FilterOutcome::Feasible { input, .. } => Some(*input),
            FilterOutcome::Infeasible => None,
        }
    }
}

/// Minimally modifies `k_nom` subject to the robust constraint of every
/// measured obstacle. With `input_box` set the box becomes part of the
/// program; otherwise the program is solved over the whole plane.
pub fn trop_filter(
    x: &UnicycleState,
    measured: &[Obstacle],
    zeta: f64,
    params: &RobustParams,
    k_nom: ControlInput,
    input_box: Option<&InputBox>,
) -> Result<FilterOutcome> {
    let mut constraints = robust_constraints(x, measured, zeta, params)?;
    if let Some(bx) = input_box {
        constraints.extend(bx.constraints());
    }
    Ok(match socp::project(k_nom.as_array(), &constraints) {
        SocpOutcome::Optimal { v, status } => FilterOutcome::Feasible {
            input: ControlInput::new(v[0], v[1]),
            status: if status == socp::SocpStatus::Unconstrained {
                FilterStatus::Nominal
            } else {
                FilterStatus::Modified
            },
        },
        SocpOutcome::Infeasible => FilterOutcome::Infeasible,
    })
}

/// Worst-case safe-set inflation `delta^2 / (4 phi alpha)`.
pub fn issf_bound(delta: f64, params: &RobustParams) -> Result<f64> {
    if !(params.phi > 0.0) {
        return Err(Error::UnboundedIssf);
    }
    Ok(delta * delta / (4.0 * params.phi * params.alpha))
}

/// Sampling box over robot states and obstacle centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzDomain {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub psi: [f64; 2],
    pub center_x: [f64; 2],
    pub center_y: [f64; 2],
    pub radius: f64,
    /// Largest perturbation `|rho - rho'|` sampled.
    pub pair_radius: f64,
    /// States closer than this to either center are skipped.
    pub min_clearance: f64,
}

impl LipschitzDomain {
    /// Box around one obstacle, covering states outside its footprint.
    pub fn around(obstacle: &Obstacle, reach: f64, center_jitter: f64) -> Self {
        let [cx, cy] = obstacle.center;
        Self {
            x: [cx - reach, cx + reach],
            y: [cy - reach, cy + reach],
            psi: [-PI, PI],
            center_x: [cx - center_jitter, cx + center_jitter],
            center_y: [cy - center_jitter, cy + center_jitter],
            radius: obstacle.radius,
            pair_radius: 0.05,
            min_clearance: obstacle.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimates {
    pub lf: f64,
    pub h: f64,
    pub lg: f64,
    pub lg_norm_squared: f64,
    pub samples: usize,
    pub seed: u64,
}

impl LipschitzEstimates {
    pub fn margins(&self, epsilon: f64, alpha: f64, phi: f64) -> (f64, f64) {
        let a = epsilon * (self.lf + alpha * self.h + phi * self.lg_norm_squared);
        let b = epsilon * self.lg;
        (a, b)
    }
}

fn uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Running maxima of difference quotients w.r.t. the obstacle center.
pub fn estimate_lipschitz(
    domain: &LipschitzDomain,
    zeta: f64,
    samples: usize,
    seed: u64,
) -> Result<LipschitzEstimates> {
    if !(domain.pair_radius > 0.0) || !(domain.radius > 0.0) {
        return Err(Error::config(
            "domain",
            "pair radius and obstacle radius must be positive",
        ));
    }
    let mut rng = stream_rng(seed, Stream::Baseline, 0);
    let mut est = LipschitzEstimates {
        lf: 0.0,
        h: 0.0,
        lg: 0.0,
        lg_norm_squared: 0.0,
        samples,
        seed,
    };
    let clearance = domain.min_clearance.max(MIN_DISTANCE);
    for _ in 0..samples {
        let state = UnicycleState::new(
            uniform(&mut rng, domain.x),
            uniform(&mut rng, domain.y),
            uniform(&mut rng, domain.psi),
        );
        let rho = [
            uniform(&mut rng, domain.center_x),
            uniform(&mut rng, domain.center_y),
        ];
        let r = domain.pair_radius * rng.random::<f64>().sqrt();
        let ang = rng.random_range(0.0..2.0 * PI);
        let rho2 = [rho[0] + r * ang.cos(), rho[1] + r * ang.sin()];
        let far = |c: [f64; 2]| (c[0] - state.x).hypot(c[1] - state.y) >= clearance;
        if r <= 0.0 || !far(rho) || !far(rho2) {
            continue;
        }
        let o1 = Obstacle {
            center: rho,
            radius: domain.radius,
        };
        let o2 = Obstacle {
            center: rho2,
            radius: domain.radius,
        };
        let h1 = barrier(&state, &o1, zeta)?;
        let h2 = barrier(&state, &o2, zeta)?;
        let l1 = lie_derivatives(&state, &o1, zeta)?;
        let l2 = lie_derivatives(&state, &o2, zeta)?;
        est.lf = est.lf.max((l1.lf - l2.lf).abs() / r);
        est.h = est.h.max((h1 - h2).abs() / r);
        est.lg = est
            .lg
            .max((l1.lg[0] - l2.lg[0]).hypot(l1.lg[1] - l2.lg[1]) / r);
        est.lg_norm_squared = est
            .lg_norm_squared
            .max((l1.lg_norm_squared() - l2.lg_norm_squared()).abs() / r);
    }
    Ok(est)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineMargins {
    pub a: f64,
    pub b: f64,
    pub lipschitz: LipschitzEstimates,
}

/// Worst-case measurement-robust margins `(a, b)` for error bound `epsilon`.
pub fn conservative_baseline(
    epsilon: f64,
    domain: &LipschitzDomain,
    zeta: f64,
    alpha: f64,
    phi: f64,
    samples: usize,
    seed: u64,
) -> Result<BaselineMargins> {
    if !(epsilon >= 0.0) {
        return Err(Error::config("epsilon", "must be non-negative"));
    }
    let lipschitz = estimate_lipschitz(domain, zeta, samples, seed)?;
    let (a, b) = lipschitz.margins(epsilon, alpha, phi);
    Ok(BaselineMargins { a, b, lipschitz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(x: f64, y: f64, r: f64) -> Obstacle {
        Obstacle::new([x, y], r).unwrap()
    }

    #[test]
    fn barrier_hand_values() {
        let o = obs(1.0, 0.0, 0.3);
        assert_abs_diff_eq!(
            barrier(&UnicycleState::new(0.0, 0.0, 0.0), &o, 0.2).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            barrier(&UnicycleState::new(0.0, 0.0, PI), &o, 0.2).unwrap(),
            0.9,
            epsilon = 1e-15
        );
    }

    #[test]
    fn barrier_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let s = UnicycleState::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-PI..PI),
            );
            let o = obs(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                0.4,
            );
            let q: f64 = rng.random_range(-PI..PI);
            let rot = |p: [f64; 2]| {
                [
                    q.cos() * p[0] - q.sin() * p[1],
                    q.sin() * p[0] + q.cos() * p[1],
                ]
            };
            let [rx, ry] = rot([s.x, s.y]);
            let s2 = UnicycleState::new(rx, ry, s.psi + q);
            let o2 = obs(rot(o.center)[0], rot(o.center)[1], 0.4);
            assert_abs_diff_eq!(
                barrier(&s, &o, 0.2).unwrap(),
                barrier(&s2, &o2, 0.2).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn degenerate_geometry_is_reported() {
        let o = obs(1.0, 1.0, 0.3);
        let s = UnicycleState::new(1.0, 1.0, 0.0);
        assert!(matches!(
            barrier(&s, &o, 0.2),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(matches!(
            lie_derivatives(&s, &o, 0.2),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn lie_derivative_facing_obstacle() {
        let l =
            lie_derivatives(&UnicycleState::new(0.0, 0.0, 0.0), &obs(1.0, 0.0, 0.3), 0.2).unwrap();
        assert_eq!(l.lf, 0.0);
        assert_abs_diff_eq!(l.lg[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.lg[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lie_derivative_matches_flow_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = 1e-6;
        for _ in 0..1000 {
            let s = UnicycleState::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-PI..PI),
            );
            let o = obs(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                0.5,
            );
            if (o.center[0] - s.x).hypot(o.center[1] - s.y) < 0.2 {
                continue;
            }
            let l = lie_derivatives(&s, &o, 0.2).unwrap();
            let h = |st: UnicycleState| barrier(&st, &o, 0.2).unwrap();
            let fwd = |t: f64| UnicycleState {
                x: s.x + t * s.psi.cos(),
                y: s.y + t * s.psi.sin(),
                psi: s.psi,
            };
            let turn = |t: f64| UnicycleState {
                psi: s.psi + t,
                ..s
            };
            let dv = (h(fwd(eps)) - h(fwd(-eps))) / (2.0 * eps);
            let dw = (h(turn(eps)) - h(turn(-eps))) / (2.0 * eps);
            assert!((l.lg[0] - dv).abs() < 1e-6, "{} vs {dv}", l.lg[0]);
            assert!((l.lg[1] - dw).abs() < 1e-6, "{} vs {dw}", l.lg[1]);
        }
    }

    #[test]
    fn nominal_controller_values() {
        let g = NominalGains::default();
        let u = nominal_controller(&UnicycleState::new(0.0, 0.0, 0.0), [1.0, 0.0], &g);
        assert_abs_diff_eq!(u.v, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(u.omega, 0.0, epsilon = 1e-15);
        assert_eq!(
            nominal_controller(&UnicycleState::new(1.0, 0.0, 0.3), [1.0, 0.0], &g),
            ControlInput::default()
        );
        let b: f64 = 0.7;
        let u = nominal_controller(
            &UnicycleState::new(0.0, 0.0, b),
            [2.0 * b.cos(), 2.0 * b.sin()],
            &g,
        );
        assert_abs_diff_eq!(u.omega, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn saturation_box() {
        let b = InputBox::default();
        assert_eq!(
            b.saturate(ControlInput::new(1.0, -1.0)),
            ControlInput::new(0.3, -0.4)
        );
        assert!(b.contains(ControlInput::new(-0.2, 0.4)));
    }

    #[test]
    fn no_obstacles_returns_nominal() {
        let p = RobustParams::new(1.0, 0.5, 0.1, 0.01).unwrap();
        let k = ControlInput::new(0.4, -0.1);
        let out = trop_filter(&UnicycleState::new(0.0, 0.0, 0.0), &[], 0.2, &p, k, None).unwrap();
        assert_eq!(
            out,
            FilterOutcome::Feasible {
                input: k,
                status: FilterStatus::Nominal
            }
        );
    }

    #[test]
    fn feasible_nominal_is_returned_exactly() {
        let p = RobustParams::new(1.0, 0.1, 0.0, 0.0).unwrap();
        let k = ControlInput::new(0.25, 0.05);
        let o = [obs(3.0, 3.0, 0.3)];
        let out = trop_filter(&UnicycleState::new(0.0, 0.0, 0.0), &o, 0.2, &p, k, None).unwrap();
        assert_eq!(out.input(), Some(k));
    }

    #[test]
    fn half_plane_case_is_projection() {
        let p = RobustParams::new(2.0, 0.0, 0.0, 0.0).unwrap();
        let s = UnicycleState::new(0.0, 0.0, 0.3);
        let o = obs(0.9, 0.2, 0.5);
        let k = ControlInput::new(0.6, 0.0);
        let h = barrier(&s, &o, 0.2).unwrap();
        let l = lie_derivatives(&s, &o, 0.2).unwrap();
        let c = -2.0 * h;
        let slack = c - (l.lg[0] * k.v + l.lg[1] * k.omega);
        assert!(slack > 0.0, "instance must be active");
        let mu = slack / l.lg_norm_squared();
        let u = trop_filter(&s, &[o], 0.2, &p, k, None)
            .unwrap()
            .input()
            .unwrap();
        assert!((u.v - (k.v + mu * l.lg[0])).abs() < 1e-8);
        assert!((u.omega - (k.omega + mu * l.lg[1])).abs() < 1e-8);
    }

    #[test]
    fn huge_margin_is_infeasible_in_box() {
        let p = RobustParams::new(1.0, 0.0, 1e3, 0.0).unwrap();
        let s = UnicycleState::new(0.0, 0.0, 0.0);
        let o = [obs(1.0, 0.4, 0.3)];
        let bx = InputBox::default();
        // grid scan: the left-hand side never reaches the right-hand side
        let cons = robust_constraint(&s, &o[0], 0.2, &p).unwrap();
        let mut best = f64::NEG_INFINITY;
        for i in 0..=500 {
            for j in 0..=800 {
                let u = [-0.2 + 0.5 * i as f64 / 500.0, -0.4 + 0.8 * j as f64 / 800.0];
                best = best.max(cons.slack(u));
            }
        }
        assert!(best < 0.0);
        let out = trop_filter(&s, &o, 0.2, &p, ControlInput::new(0.3, 0.0), Some(&bx)).unwrap();
        assert_eq!(out, FilterOutcome::Infeasible);
    }

    #[test]
    fn filter_output_satisfies_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let s = UnicycleState::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-PI..PI),
            );
            let n = rng.random_range(1..=3);
            let o: Vec<_> = (0..n)
                .map(|_| {
                    obs(
                        rng.random_range(-2.5..2.5),
                        rng.random_range(-2.5..2.5),
                        0.3,
                    )
                })
                .collect();
            if o.iter().any(|o| barrier(&s, o, 0.2).unwrap() <= 0.0) {
                continue;
            }
            let p = RobustParams::new(
                rng.random_range(0.5..5.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..0.05),
            )
            .unwrap();
            let k = ControlInput::new(rng.random_range(-0.5..0.8), rng.random_range(-0.8..0.8));
            if let FilterOutcome::Feasible { input, .. } =
                trop_filter(&s, &o, 0.2, &p, k, None).unwrap()
            {
                for c in robust_constraints(&s, &o, 0.2, &p).unwrap() {
                    assert!(c.slack(input.as_array()) >= -1e-8);
                }
            }
        }
    }

    #[test]
    fn issf_bound_values() {
        let p = RobustParams::new(3.0, 0.6, 0.5, 0.015).unwrap();
        assert_eq!(issf_bound(0.0, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(issf_bound(1.0, &p).unwrap(), 1.0 / 7.2, epsilon = 1e-15);
        assert_abs_diff_eq!(
            issf_bound(2.0, &p).unwrap(),
            4.0 * issf_bound(1.0, &p).unwrap(),
            epsilon = 1e-15
        );
        let p0 = RobustParams::new(3.0, 0.0, 0.5, 0.015).unwrap();
        assert!(matches!(issf_bound(1.0, &p0), Err(Error::UnboundedIssf)));
    }

    #[test]
    fn baseline_scales_linearly_in_epsilon() {
        let d = LipschitzDomain::around(&obs(1.5, 0.6, 0.5), 1.5, 0.1);
        let zero = conservative_baseline(0.0, &d, 0.2, 2.0, 0.5, 2000, 3).unwrap();
        assert_eq!((zero.a, zero.b), (0.0, 0.0));
        let one = conservative_baseline(0.1, &d, 0.2, 2.0, 0.5, 2000, 3).unwrap();
        let two = conservative_baseline(0.2, &d, 0.2, 2.0, 0.5, 2000, 3).unwrap();
        assert_abs_diff_eq!(two.a, 2.0 * one.a, epsilon = 1e-12);
        assert_abs_diff_eq!(two.b, 2.0 * one.b, epsilon = 1e-12);
        assert!(one.a > 0.0 && one.b > 0.0);
    }

    #[test]
    fn baseline_estimate_grows_with_samples() {
        let d = LipschitzDomain::around(&obs(1.5, 0.6, 0.5), 1.5, 0.1);
        let mut prev = 0.0;
        for n in [100, 1000, 10_000] {
            let e = estimate_lipschitz(&d, 0.2, n, 11).unwrap();
            assert!(e.lg >= prev);
            prev = e.lg;
        }
    }
}
