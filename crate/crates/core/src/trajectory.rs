//! Polynomial position trajectories and the algebra the planner needs on
//! them: the energy-optimal cubic boundary-value solve, Vandermonde
//! interpolation through position nodes, evaluation, monotone inversion,
//! exact speed/acceleration extrema and squared-derivative integrals.
//!
//! A trajectory stores its coefficients about a local time origin,
//! `p(t) = sum_k c_k (t - origin)^k`. Keeping the origin near the entry
//! time avoids raising absolute simulation times (hundreds of seconds) to
//! the fourth power.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shortest horizon accepted by [`solve_cubic_bvp`] (s).
pub const MIN_BVP_DURATION: f64 = 1e-6;

/// Time the planner assigns to the entry node before interpolating, so that
/// all node times are positive whatever the absolute clock.
pub const INTERPOLATION_OFFSET: f64 = 1.0;

const BVP_RESIDUAL_TOL: f64 = 1e-9;
const NODE_RESIDUAL_TOL: f64 = 1e-8;
const INVERSION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("boundary-value system is singular (horizon {horizon} s)")]
    SingularSystem { horizon: f64 },
    #[error("interpolation needs at least two nodes, got {0}")]
    TooFewNodes(usize),
    #[error("node times must be positive and strictly increasing (node {index})")]
    NonMonotoneNodes { index: usize },
    #[error("interpolation residual {residual:e} exceeds tolerance")]
    IllConditioned { residual: f64 },
    #[error("time {t} outside trajectory domain [{t_start}, {t_end}]")]
    OutOfDomain { t: f64, t_start: f64, t_end: f64 },
    #[error("position {p} outside trajectory span [{p_start}, {p_end}]")]
    OutOfRange { p: f64, p_start: f64, p_end: f64 },
    #[error("trajectory is not increasing over its domain")]
    NotMonotone,
    #[error("invalid kinematic limits: {0}")]
    InvalidLimits(String),
    #[error("entry speed {v0} outside [{v_min}, {v_max}]")]
    EntrySpeed { v0: f64, v_min: f64, v_max: f64 },
}

/// Speed and control-input bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicLimits {
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl KinematicLimits {
    pub fn new(v_min: f64, v_max: f64, u_min: f64, u_max: f64) -> Result<Self, TrajectoryError> {
        let limits = Self {
            v_min,
            v_max,
            u_min,
            u_max,
        };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let all_finite = [self.v_min, self.v_max, self.u_min, self.u_max]
            .iter()
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(TrajectoryError::InvalidLimits("non-finite bound".into()));
        }
        if !(self.v_min > 0.0) {
            return Err(TrajectoryError::InvalidLimits(format!(
                "v_min must be positive, got {}",
                self.v_min
            )));
        }
        if !(self.v_max > self.v_min) {
            return Err(TrajectoryError::InvalidLimits(format!(
                "v_max ({}) must exceed v_min ({})",
                self.v_max, self.v_min
            )));
        }
        if !(self.u_min < 0.0 && self.u_max > 0.0) {
            return Err(TrajectoryError::InvalidLimits(format!(
                "need u_min < 0 < u_max, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        Ok(())
    }
}

/// State of a vehicle when it enters the control zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryState {
    pub t0: f64,
    pub p0: f64,
    pub v0: f64,
}

impl EntryState {
    pub fn new(
        t0: f64,
        p0: f64,
        v0: f64,
        limits: &KinematicLimits,
    ) -> Result<Self, TrajectoryError> {
        if !(v0 >= limits.v_min && v0 <= limits.v_max) {
            return Err(TrajectoryError::EntrySpeed {
                v0,
                v_min: limits.v_min,
                v_max: limits.v_max,
            });
        }
        Ok(Self { t0, p0, v0 })
    }
}

/// Position, speed, acceleration and jerk at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub p: f64,
    pub v: f64,
    pub a: f64,
    pub j: f64,
}

/// Exact speed and acceleration ranges over a trajectory's domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremaBounds {
    pub v_lo: f64,
    pub v_hi: f64,
    pub a_lo: f64,
    pub a_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTrajectory {
    /// `c_0 ..= c_d` about `origin`.
    pub coefficients: Vec<f64>,
    #[serde(default)]
    pub origin: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl PolyTrajectory {
    /// Trajectory with absolute-time coefficients (origin 0).
    pub fn new(coefficients: Vec<f64>, t_start: f64, t_end: f64) -> Self {
        Self::with_origin(coefficients, 0.0, t_start, t_end)
    }

    pub fn with_origin(coefficients: Vec<f64>, origin: f64, t_start: f64, t_end: f64) -> Self {
        assert!(!coefficients.is_empty(), "a polynomial needs a coefficient");
        assert!(
            t_start < t_end,
            "empty trajectory domain [{t_start}, {t_end}]"
        );
        Self {
            coefficients,
            origin,
            t_start,
            t_end,
        }
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Coefficients of the same polynomial expanded about `t = 0`.
    pub fn absolute_coefficients(&self) -> Vec<f64> {
        taylor_shift(&self.coefficients, self.origin)
    }

    /// The same motion delayed by `dt` seconds.
    pub fn delayed(&self, dt: f64) -> Self {
        Self {
            coefficients: self.coefficients.clone(),
            origin: self.origin + dt,
            t_start: self.t_start + dt,
            t_end: self.t_end + dt,
        }
    }

    /// Evaluates without the domain check.
    pub fn kinematics_at(&self, t: f64) -> Kinematics {
        let s = t - self.origin;
        // Horner with Taylor-coefficient accumulators for the first three derivatives.
        let mut d = [0.0f64; 4];
        for &c in self.coefficients.iter().rev() {
            d[3] = d[3] * s + d[2];
            d[2] = d[2] * s + d[1];
            d[1] = d[1] * s + d[0];
            d[0] = d[0] * s + c;
        }
        Kinematics {
            p: d[0],
            v: d[1],
            a: 2.0 * d[2],
            j: 6.0 * d[3],
        }
    }

    pub fn position_at(&self, t: f64) -> f64 {
        horner(&self.coefficients, t - self.origin)
    }

    fn derivative_coefficients(&self, order: usize) -> Vec<f64> {
        derivative(&self.coefficients, order)
    }
}

pub(crate) fn horner(coefficients: &[f64], s: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, &c| acc * s + c)
}

/// Coefficients of the `order`-th derivative.
pub(crate) fn derivative(coefficients: &[f64], order: usize) -> Vec<f64> {
    if order >= coefficients.len() {
        return vec![0.0];
    }
    coefficients
        .iter()
        .enumerate()
        .skip(order)
        .map(|(k, &c)| {
            let falling: f64 = (0..order).map(|i| (k - i) as f64).product();
            falling * c
        })
        .collect()
}

/// Re-expands `sum c_k s^k` in powers of `s + shift`, i.e. returns `d`
/// with `sum d_k (s + shift)^k == sum c_k s^k`.
pub(crate) fn taylor_shift(coefficients: &[f64], shift: f64) -> Vec<f64> {
    // q(x) = p(x - shift); synthetic division by (x + shift) repeatedly.
    let mut d = coefficients.to_vec();
    let n = d.len();
    let h = -shift;
    for i in 0..n {
        for k in (i..n - 1).rev() {
            d[k] += h * d[k + 1];
        }
    }
    d
}

fn check_domain(traj: &PolyTrajectory, t: f64) -> Result<(), TrajectoryError> {
    if t >= traj.t_start && t <= traj.t_end {
        Ok(())
    } else {
        Err(TrajectoryError::OutOfDomain {
            t,
            t_start: traj.t_start,
            t_end: traj.t_end,
        })
    }
}

/// Position and its first three derivatives at `t`.
pub fn evaluate(traj: &PolyTrajectory, t: f64) -> Result<Kinematics, TrajectoryError> {
    check_domain(traj, t)?;
    Ok(traj.kinematics_at(t))
}

/// Solves a small dense system with partial pivoting followed by one
/// round of iterative refinement. `None` when a pivot vanishes relative to
/// the largest entry of its column.
pub(crate) fn solve_dense(matrix: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    let mut lu: Vec<Vec<f64>> = matrix.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = matrix
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&a, &b| lu[a][col].abs().total_cmp(&lu[b][col].abs()))
            .unwrap();
        if lu[pivot_row][col].abs() <= scale * 1e-14 {
            return None;
        }
        lu.swap(col, pivot_row);
        perm.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = lu[row][col] / lu[col][col];
            lu[row][col] = factor;
            for k in col + 1..n {
                lu[row][k] -= factor * lu[col][k];
            }
        }
    }
    let substitute = |b: &[f64]| -> Vec<f64> {
        let mut y: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        for i in 0..n {
            for k in 0..i {
                y[i] -= lu[i][k] * y[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= lu[i][k] * y[k];
            }
            y[i] /= lu[i][i];
        }
        y
    };
    let mut x = substitute(rhs);
    let residual: Vec<f64> = (0..n)
        .map(|i| rhs[i] - matrix[i].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let correction = substitute(&residual);
    for (xi, ci) in x.iter_mut().zip(correction) {
        *xi += ci;
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Energy-optimal unconstrained cubic from the entry state to `p_f` at
/// `t_f`, with zero acceleration at exit.
///
/// The 4x4 system is assembled in local time `s = t - t0`, so the row for
/// the entry conditions is `[0 0 0 1]` and `[0 0 1 0]`.
pub fn solve_cubic_bvp(
    entry: &EntryState,
    p_f: f64,
    t_f: f64,
) -> Result<PolyTrajectory, TrajectoryError> {
    let horizon = t_f - entry.t0;
    if !(horizon >= MIN_BVP_DURATION) || !horizon.is_finite() {
        return Err(TrajectoryError::SingularSystem { horizon });
    }
    let (s0, s1) = (0.0f64, horizon);
    // unknowns ordered (c3, c2, c1, c0)
    let matrix = vec![
        vec![s0.powi(3), s0.powi(2), s0, 1.0],
        vec![3.0 * s0.powi(2), 2.0 * s0, 1.0, 0.0],
        vec![s1.powi(3), s1.powi(2), s1, 1.0],
        vec![6.0 * s1, 2.0, 0.0, 0.0],
    ];
    let rhs = [entry.p0, entry.v0, p_f, 0.0];
    let phi = solve_dense(&matrix, &rhs).ok_or(TrajectoryError::SingularSystem { horizon })?;
    let traj = PolyTrajectory::with_origin(
        vec![phi[3], phi[2], phi[1], phi[0]],
        entry.t0,
        entry.t0,
        t_f,
    );
    let start = traj.kinematics_at(entry.t0);
    let end = traj.kinematics_at(t_f);
    let worst = [
        (start.p - entry.p0) / entry.p0.abs().max(1.0),
        (start.v - entry.v0) / entry.v0.abs().max(1.0),
        (end.p - p_f) / p_f.abs().max(1.0),
        end.a,
    ]
    .iter()
    .fold(0.0f64, |m, r| m.max(r.abs()));
    if !(worst <= BVP_RESIDUAL_TOL) {
        return Err(TrajectoryError::SingularSystem { horizon });
    }
    Ok(traj)
}

/// Unique interpolating polynomial of degree `n - 1` through `n` nodes
/// `(t, p)`.
///
/// Times must be positive and strictly increasing. The system is solved in
/// local time centred on the node span, which keeps the powers small; the
/// returned trajectory keeps that centre as its origin.
pub fn interpolate_vandermonde(nodes: &[(f64, f64)]) -> Result<PolyTrajectory, TrajectoryError> {
    if nodes.len() < 2 {
        return Err(TrajectoryError::TooFewNodes(nodes.len()));
    }
    let mut previous = 0.0;
    for (index, &(t, p)) in nodes.iter().enumerate() {
        if !(t > previous) || !t.is_finite() || !p.is_finite() {
            return Err(TrajectoryError::NonMonotoneNodes { index });
        }
        previous = t;
    }
    let origin = 0.5 * (nodes[0].0 + nodes[nodes.len() - 1].0);
    let n = nodes.len();
    let matrix: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&(t, _)| {
            let s = t - origin;
            let mut row = Vec::with_capacity(n);
            let mut power = 1.0;
            for _ in 0..n {
                row.push(power);
                power *= s;
            }
            row
        })
        .collect();
    let rhs: Vec<f64> = nodes.iter().map(|&(_, p)| p).collect();
    let coefficients = solve_dense(&matrix, &rhs).ok_or(TrajectoryError::IllConditioned {
        residual: f64::INFINITY,
    })?;
    let traj = PolyTrajectory::with_origin(coefficients, origin, nodes[0].0, nodes[n - 1].0);
    let residual = nodes
        .iter()
        .map(|&(t, p)| (traj.position_at(t) - p).abs() / p.abs().max(1.0))
        .fold(0.0f64, f64::max);
    if !(residual <= NODE_RESIDUAL_TOL) {
        return Err(TrajectoryError::IllConditioned { residual });
    }
    Ok(traj)
}

/// `prod_{i<j} (x_j - x_i)`; 1 for a single node.
pub fn vandermonde_determinant(times: &[f64]) -> f64 {
    let mut det = 1.0;
    for j in 0..times.len() {
        for i in 0..j {
            det *= times[j] - times[i];
        }
    }
    det
}

/// Time at which an increasing trajectory reaches position `p`.
pub fn invert_position(traj: &PolyTrajectory, p: f64) -> Result<f64, TrajectoryError> {
    let c = &traj.coefficients;
    let dc = derivative(c, 1);
    let (mut lo, mut hi) = (traj.t_start - traj.origin, traj.t_end - traj.origin);
    let (p_start, p_end) = (horner(c, lo), horner(c, hi));
    if p_start > p_end {
        return Err(TrajectoryError::NotMonotone);
    }
    let tol = INVERSION_TOL * p.abs().max(1.0);
    if p < p_start - tol || p > p_end + tol {
        return Err(TrajectoryError::OutOfRange { p, p_start, p_end });
    }
    if p <= p_start {
        return Ok(traj.t_start);
    }
    if p >= p_end {
        return Ok(traj.t_end);
    }
    let mut s = lo + (hi - lo) * (p - p_start) / (p_end - p_start);
    for _ in 0..200 {
        let f = horner(c, s) - p;
        if f.abs() <= tol * 0.5 {
            break;
        }
        if f < 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let slope = horner(&dc, s);
        let newton = s - f / slope;
        s = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    Ok((s + traj.origin).clamp(traj.t_start, traj.t_end))
}

/// Real roots of a polynomial (coefficients in ascending order) inside
/// `[lo, hi]`, sorted. Closed form up to quadratics; higher degrees are
/// isolated between the roots of the derivative and bisected.
pub(crate) fn real_roots_in(coefficients: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut c = coefficients.to_vec();
    while c.len() > 1 && *c.last().unwrap() == 0.0 {
        c.pop();
    }
    let inside = |x: &f64| *x >= lo && *x <= hi;
    let mut roots: Vec<f64> = match c.len() {
        0 | 1 => Vec::new(),
        2 => vec![-c[0] / c[1]],
        3 => {
            let (a, b, cc) = (c[2], c[1], c[0]);
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                Vec::new()
            } else {
                let q = -0.5 * (b + b.signum() * disc.sqrt());
                let mut r = Vec::with_capacity(2);
                if q != 0.0 {
                    r.push(q / a);
                    r.push(cc / q);
                } else {
                    r.push(0.0);
                }
                r
            }
        }
        _ => {
            let mut breaks = vec![lo];
            breaks.extend(real_roots_in(&derivative(&c, 1), lo, hi));
            breaks.push(hi);
            let mut found = Vec::new();
            for w in breaks.windows(2) {
                let (mut a, mut b) = (w[0], w[1]);
                let (fa, fb) = (horner(&c, a), horner(&c, b));
                if fa == 0.0 {
                    found.push(a);
                    continue;
                }
                if fa.signum() == fb.signum() {
                    continue;
                }
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if m <= a || m >= b {
                        break;
                    }
                    if horner(&c, m).signum() == fa.signum() {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                found.push(0.5 * (a + b));
            }
            found
        }
    };
    roots.retain(inside);
    roots.sort_by(f64::total_cmp);
    roots
}

/// (min, argmin, max, argmax) of a polynomial over `[lo, hi]`.
fn range_over(coefficients: &[f64], lo: f64, hi: f64) -> (f64, f64, f64, f64) {
    let slope = derivative(coefficients, 1);
    let mut candidates = vec![lo, hi];
    candidates.extend(real_roots_in(&slope, lo, hi));
    let mut out = (f64::INFINITY, lo, f64::NEG_INFINITY, lo);
    for s in candidates {
        let v = horner(coefficients, s);
        if v < out.0 {
            out.0 = v;
            out.1 = s;
        }
        if v > out.2 {
            out.2 = v;
            out.3 = s;
        }
    }
    out
}

/// Times (absolute) at which the extremes of [`ExtremaBounds`] occur.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremaTimes {
    pub v_lo: f64,
    pub v_hi: f64,
    pub a_lo: f64,
    pub a_hi: f64,
}

/// Exact minimum and maximum of speed and acceleration over the domain.
pub fn extrema_bounds(traj: &PolyTrajectory) -> ExtremaBounds {
    extrema_with_times(traj).0
}

pub fn extrema_with_times(traj: &PolyTrajectory) -> (ExtremaBounds, ExtremaTimes) {
    let (lo, hi) = (traj.t_start - traj.origin, traj.t_end - traj.origin);
    let v = range_over(&traj.derivative_coefficients(1), lo, hi);
    let a = range_over(&traj.derivative_coefficients(2), lo, hi);
    let o = traj.origin;
    (
        ExtremaBounds {
            v_lo: v.0,
            v_hi: v.2,
            a_lo: a.0,
            a_hi: a.2,
        },
        ExtremaTimes {
            v_lo: v.1 + o,
            v_hi: v.3 + o,
            a_lo: a.1 + o,
            a_hi: a.3 + o,
        },
    )
}

/// `integral over the domain of (d^order p / dt^order)^2 dt`, exact.
pub fn squared_derivative_integral(traj: &PolyTrajectory, order: usize) -> f64 {
    let d = traj.derivative_coefficients(order);
    let mut square = vec![0.0; 2 * d.len() - 1];
    for (i, a) in d.iter().enumerate() {
        for (j, b) in d.iter().enumerate() {
            square[i + j] += a * b;
        }
    }
    let (lo, hi) = (traj.t_start - traj.origin, traj.t_end - traj.origin);
    // antiderivative evaluated at both ends
    let antiderivative = |s: f64| {
        square
            .iter()
            .enumerate()
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * s + c / (k as f64 + 1.0))
            * s
    };
    antiderivative(hi) - antiderivative(lo)
}

/// `integral of j(t)^2 dt` over the domain.
pub fn squared_jerk_integral(traj: &PolyTrajectory) -> f64 {
    squared_derivative_integral(traj, 3)
}

/// Energy proxy `integral of u(t)^2 dt` over the domain.
pub fn squared_accel_integral(traj: &PolyTrajectory) -> f64 {
    squared_derivative_integral(traj, 2)
}

/// Time needed to cover `distance` starting at `v0` while pushing the
/// input to its limit (`u_max` when `accelerate`, else `u_min`) until the
/// speed saturates, then cruising.
pub fn bang_travel_time(v0: f64, limits: &KinematicLimits, distance: f64, accelerate: bool) -> f64 {
    let (u, v_sat) = if accelerate {
        (limits.u_max, limits.v_max)
    } else {
        (limits.u_min, limits.v_min)
    };
    let ramp_time = (v_sat - v0) / u;
    let ramp_distance = 0.5 * (v0 + v_sat) * ramp_time;
    if ramp_distance >= distance {
        // distance = v0 t + u t^2 / 2, first positive root
        let disc = (v0 * v0 + 2.0 * u * distance).max(0.0);
        2.0 * distance / (v0 + disc.sqrt())
    } else {
        ramp_time + (distance - ramp_distance) / v_sat
    }
}

/// Earliest and latest exit times reachable from `entry` over
/// `path_length` metres.
pub fn feasible_exit_range(
    entry: &EntryState,
    limits: &KinematicLimits,
    path_length: f64,
) -> (f64, f64) {
    let distance = path_length - entry.p0;
    (
        entry.t0 + bang_travel_time(entry.v0, limits, distance, true),
        entry.t0 + bang_travel_time(entry.v0, limits, distance, false),
    )
}
