//! Euclidean projection onto an intersection of planar second-order cones.
//!
//! Solves
//!
//! ```text
//! minimize    ||v - target||^2
//! subject to  a_i . v - b_i ||v|| >= c_i      for every constraint i
//! ```
//!
//! over `v` in R^2 with a log-barrier interior-point method (phase I for a
//! strictly feasible start, phase II along the central path) followed by an
//! active-set polish that solves the KKT system of the binding constraints
//! exactly.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

/// `a . v - b ||v|| >= c`. With `b = 0` this is a half-plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeConstraint {
    pub a: [f64; 2],
    pub b: f64,
    pub c: f64,
}

impl ConeConstraint {
    pub fn new(a: [f64; 2], b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn slack(&self, v: [f64; 2]) -> f64 {
        self.a[0] * v[0] + self.a[1] * v[1] - self.b * v[0].hypot(v[1]) - self.c
    }

    fn a_vec(&self) -> Vector2<f64> {
        Vector2::new(self.a[0], self.a[1])
    }

    fn degree(&self) -> f64 {
        if self.b > 0.0 {
            2.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SocpStatus {
    /// The target already satisfies every constraint.
    Unconstrained,
    /// Optimal point from the polished active-set solve.
    Polished,
    /// Optimal point from the barrier iterates only.
    Barrier,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SocpOutcome {
    Optimal { v: [f64; 2], status: SocpStatus },
    Infeasible,
}

impl SocpOutcome {
    pub fn point(&self) -> Option<[f64; 2]> {
        match self {
            SocpOutcome::Optimal { v, .. } => Some(*v),
            SocpOutcome::Infeasible => None,
        }
    }
}

const MAX_RADIUS: f64 = 1e6;
const GAP_TOL: f64 = 1e-11;

/// Projects `target` onto the feasible set of `constraints`.
pub fn project(target: [f64; 2], constraints: &[ConeConstraint]) -> SocpOutcome {
    if constraints.iter().all(|k| k.slack(target) >= 0.0) {
        return SocpOutcome::Optimal {
            v: target,
            status: SocpStatus::Unconstrained,
        };
    }
    let k = Vector2::new(target[0], target[1]);
    let radius = search_radius(&k, constraints);

    let Some(start) = phase_one(&k, constraints, radius) else {
        return SocpOutcome::Infeasible;
    };
    let v_barrier = phase_two(&k, constraints, start);

    match polish(&k, constraints, &v_barrier) {
        Some(v) => SocpOutcome::Optimal {
            v: [v.x, v.y],
            status: SocpStatus::Polished,
        },
        None => SocpOutcome::Optimal {
            v: [v_barrier.x, v_barrier.y],
            status: SocpStatus::Barrier,
        },
    }
}

fn search_radius(k: &Vector2<f64>, constraints: &[ConeConstraint]) -> f64 {
    let mut r = 10.0 * (1.0 + k.norm());
    for c in constraints {
        let margin = (c.a_vec().norm() - c.b).max(1e-6);
        r = r.max(10.0 * (1.0 + c.c.abs() / margin));
    }
    r.min(MAX_RADIUS)
}

/// Barrier contributions of one constraint at `(v, shift)`.
/// Returns `None` outside the domain. `with_shift` selects the phase I
/// variant where the scalar shift is a third decision variable.
fn cone_barrier(
    c: &ConeConstraint,
    v: &Vector2<f64>,
    shift: f64,
    with_shift: bool,
) -> Option<(f64, Vector3<f64>, Matrix3<f64>)> {
    let a = c.a_vec();
    let u = a.dot(v) - c.c + shift;
    let du = Vector3::new(a.x, a.y, if with_shift { 1.0 } else { 0.0 });
    if c.b > 0.0 {
        let g = u * u - c.b * c.b * v.norm_squared();
        if !(u > 0.0 && g > 0.0) {
            return None;
        }
        let b2 = c.b * c.b;
        let dg = du * (2.0 * u) - Vector3::new(v.x, v.y, 0.0) * (2.0 * b2);
        let mut d2g = du * du.transpose() * 2.0;
        d2g[(0, 0)] -= 2.0 * b2;
        d2g[(1, 1)] -= 2.0 * b2;
        let value = -g.ln();
        let grad = -dg / g;
        let hess = dg * dg.transpose() / (g * g) - d2g / g;
        Some((value, grad, hess))
    } else {
        if !(u > 0.0) {
            return None;
        }
        Some((-u.ln(), -du / u, du * du.transpose() / (u * u)))
    }
}

struct PhaseOne<'a> {
    constraints: &'a [ConeConstraint],
    radius: f64,
}

impl PhaseOne<'_> {
    /// `t * s + sum(barriers)` over x = (v, s), plus `-ln(s + 1)` and the
    /// radius bound `-ln(R^2 - |v|^2)`.
    fn eval(&self, x: &Vector3<f64>, t: f64) -> Option<(f64, Vector3<f64>, Matrix3<f64>)> {
        let v = Vector2::new(x.x, x.y);
        let s = x.z;
        let mut value = t * s;
        let mut grad = Vector3::new(0.0, 0.0, t);
        let mut hess = Matrix3::zeros();
        for c in self.constraints {
            let (f, g, h) = cone_barrier(c, &v, s, true)?;
            value += f;
            grad += g;
            hess += h;
        }
        let floor = s + 1.0;
        if !(floor > 0.0) {
            return None;
        }
        value -= floor.ln();
        grad.z -= 1.0 / floor;
        hess[(2, 2)] += 1.0 / (floor * floor);

        let room = self.radius * self.radius - v.norm_squared();
        if !(room > 0.0) {
            return None;
        }
        value -= room.ln();
        let dv = Vector3::new(-2.0 * v.x, -2.0 * v.y, 0.0);
        grad -= dv / room;
        let mut d2 = Matrix3::zeros();
        d2[(0, 0)] = -2.0;
        d2[(1, 1)] = -2.0;
        hess += dv * dv.transpose() / (room * room) - d2 / room;
        Some((value, grad, hess))
    }
}

fn strictly_feasible(constraints: &[ConeConstraint], v: &Vector2<f64>) -> bool {
    constraints.iter().all(|c| c.slack([v.x, v.y]) > 0.0)
}

fn phase_one(
    k: &Vector2<f64>,
    constraints: &[ConeConstraint],
    radius: f64,
) -> Option<Vector2<f64>> {
    let mut v = *k;
    if v.norm() >= 0.5 * radius {
        v *= 0.5 * radius / v.norm();
    }
    let worst = constraints
        .iter()
        .map(|c| -c.slack([v.x, v.y]))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut x = Vector3::new(v.x, v.y, worst.max(0.0) + 1.0);
    let problem = PhaseOne {
        constraints,
        radius,
    };
    let degree: f64 = constraints.iter().map(ConeConstraint::degree).sum::<f64>() + 2.0;

    let mut t = 1.0;
    for _ in 0..60 {
        for _ in 0..100 {
            let (value, grad, hess) = problem.eval(&x, t)?;
            let Some(step) = hess.cholesky().map(|ch| -ch.solve(&grad)) else {
                break;
            };
            let decrement = -grad.dot(&step);
            if decrement < 1e-14 {
                break;
            }
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-14 {
                let trial = x + step * alpha;
                if let Some((tv, _, _)) = problem.eval(&trial, t) {
                    if tv <= value - 0.25 * alpha * decrement {
                        x = trial;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let v = Vector2::new(x.x, x.y);
            if strictly_feasible(constraints, &v) {
                return Some(v);
            }
            if !moved {
                break;
            }
        }
        let v = Vector2::new(x.x, x.y);
        if strictly_feasible(constraints, &v) {
            return Some(v);
        }
        // the central point bounds the optimal shift from below
        if x.z - degree / t > 0.0 {
            return None;
        }
        if degree / t < 1e-13 {
            return None;
        }
        t *= 8.0;
    }
    None
}

fn phase_two_eval(
    k: &Vector2<f64>,
    constraints: &[ConeConstraint],
    v: &Vector2<f64>,
    t: f64,
) -> Option<(f64, Vector2<f64>, Matrix2<f64>)> {
    let diff = v - k;
    let mut value = 0.5 * t * diff.norm_squared();
    let mut grad = diff * t;
    let mut hess = Matrix2::identity() * t;
    for c in constraints {
        let (f, g, h) = cone_barrier(c, v, 0.0, false)?;
        value += f;
        grad += Vector2::new(g.x, g.y);
        hess += h.fixed_view::<2, 2>(0, 0).into_owned();
    }
    Some((value, grad, hess))
}

fn phase_two(
    k: &Vector2<f64>,
    constraints: &[ConeConstraint],
    start: Vector2<f64>,
) -> Vector2<f64> {
    let degree: f64 = constraints.iter().map(ConeConstraint::degree).sum();
    let scale = 1.0 + (start - k).norm_squared();
    let mut t = degree / scale;
    let mut v = start;
    loop {
        for _ in 0..100 {
            let Some((value, grad, hess)) = phase_two_eval(k, constraints, &v, t) else {
                break;
            };
            let Some(step) = hess.cholesky().map(|ch| -ch.solve(&grad)) else {
                break;
            };
            let decrement = -grad.dot(&step);
            if decrement < 1e-16 {
                break;
            }
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-16 {
                let trial = v + step * alpha;
                if let Some((tv, _, _)) = phase_two_eval(k, constraints, &trial, t) {
                    if tv <= value - 0.25 * alpha * decrement {
                        v = trial;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !moved || decrement < 1e-12 {
                break;
            }
        }
        if degree / t < GAP_TOL {
            return v;
        }
        t *= 10.0;
    }
}

fn objective(k: &Vector2<f64>, v: &Vector2<f64>) -> f64 {
    (v - k).norm_squared()
}

/// Value, gradient and Hessian of `g(v) = a.v - b|v| - c`.
fn boundary(c: &ConeConstraint, v: &Vector2<f64>) -> Option<(f64, Vector2<f64>, Matrix2<f64>)> {
    let a = c.a_vec();
    if c.b == 0.0 {
        return Some((a.dot(v) - c.c, a, Matrix2::zeros()));
    }
    let n = v.norm();
    if n < 1e-12 {
        return None;
    }
    let unit = v / n;
    let grad = a - unit * c.b;
    let hess = -(Matrix2::identity() - unit * unit.transpose()) * (c.b / n);
    Some((a.dot(v) - c.b * n - c.c, grad, hess))
}

fn polish(
    k: &Vector2<f64>,
    constraints: &[ConeConstraint],
    v_barrier: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    let scale = |c: &ConeConstraint| 1.0 + c.c.abs() + c.a_vec().norm();
    let mut near: Vec<(usize, f64)> = constraints
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.slack([v_barrier.x, v_barrier.y]) / scale(c)))
        .filter(|&(_, s)| s < 1e-4)
        .collect();
    near.sort_by(|x, y| x.1.total_cmp(&y.1));
    let f_barrier = objective(k, v_barrier);

    let accept = |v: Vector2<f64>| -> bool {
        v.iter().all(|x| x.is_finite())
            && constraints
                .iter()
                .all(|c| c.slack([v.x, v.y]) >= -1e-12 * scale(c))
            && objective(k, &v) <= f_barrier + 1e-12 * (1.0 + f_barrier)
    };

    for &(i, _) in &near {
        if let Some(v) = polish_single(k, &constraints[i], v_barrier) {
            if accept(v) {
                return Some(v);
            }
        }
    }
    for (p, &(i, _)) in near.iter().enumerate() {
        for &(j, _) in &near[p + 1..] {
            if let Some(v) = polish_pair(k, &constraints[i], &constraints[j], v_barrier) {
                if accept(v) {
                    return Some(v);
                }
            }
        }
    }
    None
}

fn polish_single(k: &Vector2<f64>, c: &ConeConstraint, v0: &Vector2<f64>) -> Option<Vector2<f64>> {
    if c.b == 0.0 {
        let a = c.a_vec();
        let mu = (c.c - a.dot(k)) / a.norm_squared();
        if !(mu >= 0.0) {
            return None;
        }
        return Some(k + a * mu);
    }
    // Newton on  v - k - mu * grad g(v) = 0,  g(v) = 0
    let (_, g0, _) = boundary(c, v0)?;
    let mut v = *v0;
    let mut mu = (v0 - k).dot(&g0) / g0.norm_squared();
    for _ in 0..50 {
        let (g, dg, d2g) = boundary(c, &v)?;
        let r1 = v - k - dg * mu;
        let residual = r1.norm() + g.abs();
        if residual < 1e-15 * (1.0 + k.norm()) {
            break;
        }
        let top = Matrix2::identity() - d2g * mu;
        let jac = Matrix3::new(
            top[(0, 0)],
            top[(0, 1)],
            -dg.x, //
            top[(1, 0)],
            top[(1, 1)],
            -dg.y, //
            dg.x,
            dg.y,
            0.0,
        );
        let rhs = Vector3::new(-r1.x, -r1.y, -g);
        let step = jac.lu().solve(&rhs)?;
        v += Vector2::new(step.x, step.y);
        mu += step.z;
    }
    let (g, dg, _) = boundary(c, &v)?;
    let r1 = v - k - dg * mu;
    if mu < -1e-12 || g.abs() > 1e-12 * (1.0 + c.c.abs()) || r1.norm() > 1e-9 * (1.0 + k.norm()) {
        return None;
    }
    Some(v)
}

fn polish_pair(
    k: &Vector2<f64>,
    ci: &ConeConstraint,
    cj: &ConeConstraint,
    v0: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    let mut v = *v0;
    for _ in 0..50 {
        let (gi, di, _) = boundary(ci, &v)?;
        let (gj, dj, _) = boundary(cj, &v)?;
        if gi.abs() + gj.abs() < 1e-15 {
            break;
        }
        let jac = Matrix2::new(di.x, di.y, dj.x, dj.y);
        let step = jac.lu().solve(&Vector2::new(-gi, -gj))?;
        v += step;
    }
    let (gi, di, _) = boundary(ci, &v)?;
    let (gj, dj, _) = boundary(cj, &v)?;
    if gi.abs() > 1e-12 * (1.0 + ci.c.abs()) || gj.abs() > 1e-12 * (1.0 + cj.c.abs()) {
        return None;
    }
    let basis = Matrix2::new(di.x, dj.x, di.y, dj.y);
    let mu = basis.lu().solve(&(v - k))?;
    if mu.x < -1e-10 || mu.y < -1e-10 {
        return None;
    }
    Some(v)
}
