//! Per-vehicle planning against the occupancy ledger.
//!
//! The first level scans candidate exit times upward from the earliest
//! reachable one, solving the energy-optimal cubic for each and accepting
//! the first candidate that respects every bound and headway. When the scan
//! is exhausted the fallback picks one idle window per conflict point
//! (midpoint rule, minimum jerk), then searches crossing and exit times
//! inside those windows for the minimum-jerk interpolating polynomial
//! through entry, conflict points and exit.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    check_rear_end, check_state_bounds, idle_windows, CommittedTrajectory, OccupancyLedger,
    RearEndProfile, SafetyParams, TimeWindow, VehicleId, BOUND_TOL, DEFAULT_REAR_END_STEP,
    LATERAL_TOL,
};
use crate::geometry::{ConflictId, IntersectionLayout, LayoutError, PathDescriptor, PathId};
use crate::trajectory::solve_dense;
use crate::trajectory::{
    bang_travel_time, extrema_bounds, feasible_exit_range, interpolate_vandermonde,
    invert_position, solve_cubic_bvp, squared_jerk_integral, EntryState, KinematicLimits,
    PolyTrajectory, TrajectoryError, INTERPOLATION_OFFSET,
};

pub const DEFAULT_SCAN_STEP: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("entry position must be 0 in path coordinates, got {0}")]
    EntryPosition(f64),
    #[error("scan step must be positive, got {0}")]
    ScanStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_iterations: usize,
    /// Pattern size (s) below which the search stops.
    pub tolerance: f64,
    pub penalty_weight: f64,
    /// Minimum spacing (s) between consecutive node times.
    pub ordering_margin: f64,
    /// Points per axis of the coarse grid used to pick extra starts,
    /// reduced as needed to keep the grid within 5000 points.
    pub grid_points: usize,
    /// Best grid points started from, besides the seed and the best
    /// feasible grid point of each orthant.
    pub extra_starts: usize,
    /// Local searches refined to full tolerance after the coarse round.
    pub refine_starts: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-4,
            penalty_weight: 1e6,
            ordering_margin: 1e-3,
            grid_points: 8,
            extra_starts: 4,
            refine_starts: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerOptions {
    pub scan_step: f64,
    pub rear_end_step: f64,
    pub optimizer: OptimizerOptions,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            scan_step: DEFAULT_SCAN_STEP,
            rear_end_step: DEFAULT_REAR_END_STEP,
            optimizer: OptimizerOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub vehicle_id: VehicleId,
    pub path_id: PathId,
    pub entry: EntryState,
    pub limits: KinematicLimits,
    pub params: SafetyParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanStatus {
    Cubic,
    QuarticFallback,
    Infeasible,
}

/// Conflict-point crossing times in travel order, then the exit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTimes {
    pub crossings: Vec<f64>,
    pub exit: f64,
}

impl NodeTimes {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.crossings.clone();
        v.push(self.exit);
        v
    }

    pub fn from_slice(x: &[f64]) -> Self {
        let (exit, crossings) = x.split_last().expect("at least the exit time");
        Self {
            crossings: crossings.to_vec(),
            exit: *exit,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Exit-time candidates evaluated by the cubic scan.
    pub scan_steps: usize,
    /// Window combinations scored during convex-set selection.
    pub combinations: usize,
    pub seed_objective: Option<f64>,
    pub fallback_objective: Option<f64>,
    pub optimizer_evaluations: usize,
    /// Whether the fallback had to tighten its windows behind the leader.
    pub rear_end_tightened: bool,
    /// `|v(t0) - v0|` of the committed trajectory.
    pub entry_speed_jump: Option<f64>,
    pub rejection: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub vehicle_id: VehicleId,
    pub path_id: PathId,
    pub status: PlanStatus,
    pub trajectory: Option<PolyTrajectory>,
    pub exit_time: Option<f64>,
    pub crossing_times: Vec<(ConflictId, f64)>,
    pub diagnostics: Diagnostics,
    /// Wall-clock planning time (s). Not part of the deterministic output.
    pub solve_seconds: f64,
}

impl PlanResult {
    /// Equality on everything except wall-clock time.
    pub fn same_plan(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.solve_seconds = other.solve_seconds;
        a == *other
    }
}

/// Windows chosen for the fallback, with the midpoint seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSelection {
    pub windows: Vec<TimeWindow>,
    pub exit_window: TimeWindow,
    pub seed: NodeTimes,
    pub seed_objective: f64,
    pub combinations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("no ordered combination of idle windows: {0}")]
    NoCombination(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("no node times inside the windows satisfy the speed and input bounds")]
pub struct FallbackInfeasible {
    pub evaluations: usize,
}

/// Node-time search problem: positions are fixed, times live in a box.
#[derive(Debug, Clone, PartialEq)]
pub struct FallbackProblem {
    pub entry: EntryState,
    pub limits: KinematicLimits,
    /// Conflict positions in travel order followed by the exit position.
    pub positions: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl FallbackProblem {
    pub fn from_selection(
        req: &PlanRequest,
        path: &PathDescriptor,
        selection: &ConvexSelection,
    ) -> Self {
        let mut positions: Vec<f64> = path.conflict_positions().collect();
        positions.push(path.length);
        let mut lower: Vec<f64> = selection.windows.iter().map(|w| w.start).collect();
        let mut upper: Vec<f64> = selection.windows.iter().map(|w| w.end).collect();
        lower.push(selection.exit_window.start);
        upper.push(selection.exit_window.end);
        Self {
            entry: req.entry,
            limits: req.limits,
            positions,
            lower,
            upper,
        }
    }

    pub fn dimension(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedNodes {
    pub nodes: NodeTimes,
    pub trajectory: PolyTrajectory,
    pub objective: f64,
    pub evaluations: usize,
}

/// Interpolant through `(t0, p0)` and `(times[i], positions[i])`.
///
/// Interpolation runs in entry-relative time so that an entry at `t = 0`
/// still yields positive nodes.
pub fn interpolate_through(
    entry: &EntryState,
    positions: &[f64],
    times: &[f64],
) -> Result<PolyTrajectory, TrajectoryError> {
    let shift = entry.t0 - INTERPOLATION_OFFSET;
    let mut nodes = Vec::with_capacity(times.len() + 1);
    nodes.push((entry.t0 - shift, entry.p0));
    nodes.extend(times.iter().zip(positions).map(|(&t, &p)| (t - shift, p)));
    let local = interpolate_vandermonde(&nodes)?;
    let mut traj = local.delayed(shift);
    // keep the endpoints exact rather than off by the shift's rounding
    traj.t_start = entry.t0;
    traj.t_end = *times.last().unwrap_or(&entry.t0);
    Ok(traj)
}

/// Checks against everything already committed on the path and at its
/// conflict points.
struct Context<'a> {
    req: &'a PlanRequest,
    path: &'a PathDescriptor,
    ledger: &'a OccupancyLedger,
    leader: Option<&'a CommittedTrajectory>,
    leader_profile: Option<RearEndProfile>,
    follower: Option<&'a CommittedTrajectory>,
    rear_end_step: f64,
}

impl<'a> Context<'a> {
    fn new(
        req: &'a PlanRequest,
        ledger: &'a OccupancyLedger,
        layout: &'a IntersectionLayout,
        rear_end_step: f64,
    ) -> Result<Self, PlanError> {
        let path = layout.path(req.path_id)?;
        if req.entry.p0 != 0.0 {
            return Err(PlanError::EntryPosition(req.entry.p0));
        }
        req.limits.validate()?;
        EntryState::new(req.entry.t0, req.entry.p0, req.entry.v0, &req.limits)?;
        let leader = ledger.leader(req.path_id, req.entry.t0);
        let leader_profile = leader
            .map(|l| RearEndProfile::new(&l.trajectory, rear_end_step))
            .transpose()?;
        Ok(Self {
            req,
            path,
            ledger,
            leader,
            leader_profile,
            follower: ledger.follower(req.path_id, req.entry.t0),
            rear_end_step,
        })
    }

    fn exit_range(&self) -> (f64, f64) {
        let (lo, hi) = feasible_exit_range(&self.req.entry, &self.req.limits, self.path.length);
        let lo = match self.leader {
            Some(l) => lo.max(l.trajectory.t_end + self.req.params.tau_r),
            None => lo,
        };
        (lo, hi)
    }

    fn crossing_times(
        &self,
        traj: &PolyTrajectory,
    ) -> Result<Vec<(ConflictId, f64)>, TrajectoryError> {
        self.path
            .conflicts
            .iter()
            .map(|c| Ok((c.conflict_id, invert_position(traj, c.position)?)))
            .collect()
    }

    fn lateral_clear(&self, crossings: &[(ConflictId, f64)], slack: f64) -> Result<(), String> {
        let tau_l = self.req.params.tau_l;
        for &(conflict_id, t) in crossings {
            if let Some(c) =
                self.ledger.crossings_at(conflict_id).iter().find(|c| {
                    c.vehicle_id != self.req.vehicle_id && (c.time - t).abs() < tau_l - slack
                })
            {
                return Err(format!(
                    "lateral conflict with vehicle {} at conflict {conflict_id}",
                    c.vehicle_id
                ));
            }
        }
        Ok(())
    }

    fn rear_end_clear(&self, traj: &PolyTrajectory) -> Result<(), String> {
        let tau_r = self.req.params.tau_r;
        if let (Some(profile), Some(leader)) = (&self.leader_profile, self.leader) {
            match profile.check(traj, tau_r) {
                Ok(None) => {}
                Ok(Some(v)) => {
                    return Err(format!(
                        "rear-end headway to vehicle {} short by {:.3} s at {:.1} m",
                        leader.vehicle_id, v.margin, v.at
                    ))
                }
                Err(e) => return Err(e.to_string()),
            }
        }
        if let Some(follower) = self.follower {
            match check_rear_end(&follower.trajectory, traj, tau_r, self.rear_end_step) {
                Ok(None) => {}
                Ok(Some(_)) => {
                    return Err(format!(
                        "rear-end headway to follower {} violated",
                        follower.vehicle_id
                    ))
                }
                Err(e) => return Err(e.to_string()),
            }
        }
        Ok(())
    }

    /// Full constraint set; crossing times come from the trajectory itself.
    fn verify(&self, traj: &PolyTrajectory) -> Result<Vec<(ConflictId, f64)>, String> {
        if let Some(v) = check_state_bounds(traj, &self.req.limits) {
            return Err(format!("{:?} exceeded by {:.3e}", v.kind, v.margin));
        }
        let crossings = self.crossing_times(traj).map_err(|e| e.to_string())?;
        self.lateral_clear(&crossings, LATERAL_TOL)?;
        self.rear_end_clear(traj)?;
        Ok(crossings)
    }

    fn scan(
        &self,
        step: f64,
        diagnostics: &mut Diagnostics,
    ) -> Option<(PolyTrajectory, Vec<(ConflictId, f64)>)> {
        let (lo, hi) = self.exit_range();
        let mut k = 0usize;
        loop {
            let t_f = lo + k as f64 * step;
            if t_f > hi + 1e-9 {
                return None;
            }
            k += 1;
            diagnostics.scan_steps = k;
            let Ok(traj) = solve_cubic_bvp(&self.req.entry, self.path.length, t_f) else {
                continue;
            };
            if check_state_bounds(&traj, &self.req.limits).is_some() {
                continue;
            }
            let Ok(crossings) = self.crossing_times(&traj) else {
                continue;
            };
            if self.lateral_clear(&crossings, 0.0).is_err() || self.rear_end_clear(&traj).is_err() {
                continue;
            }
            return Some((traj, crossings));
        }
    }
}

fn infeasible(
    req: &PlanRequest,
    diagnostics: Diagnostics,
    reason: String,
    started: Instant,
) -> PlanResult {
    PlanResult {
        vehicle_id: req.vehicle_id,
        path_id: req.path_id,
        status: PlanStatus::Infeasible,
        trajectory: None,
        exit_time: None,
        crossing_times: Vec::new(),
        diagnostics: Diagnostics {
            rejection: Some(reason),
            ..diagnostics
        },
        solve_seconds: started.elapsed().as_secs_f64(),
    }
}

/// First exit time on the `step` grid above the earliest reachable one
/// whose cubic respects bounds and headways. Does not touch the ledger.
pub fn plan_cubic_scan(
    req: &PlanRequest,
    ledger: &OccupancyLedger,
    layout: &IntersectionLayout,
    step: f64,
) -> Result<PlanResult, PlanError> {
    if !(step > 0.0) {
        return Err(PlanError::ScanStep(step));
    }
    let started = Instant::now();
    let ctx = Context::new(req, ledger, layout, DEFAULT_REAR_END_STEP)?;
    let mut diagnostics = Diagnostics::default();
    Ok(match ctx.scan(step, &mut diagnostics) {
        Some((traj, crossings)) => PlanResult {
            vehicle_id: req.vehicle_id,
            path_id: req.path_id,
            status: PlanStatus::Cubic,
            exit_time: Some(traj.t_end),
            trajectory: Some(traj),
            crossing_times: crossings,
            diagnostics,
            solve_seconds: started.elapsed().as_secs_f64(),
        },
        None => infeasible(req, diagnostics, "exit-time scan exhausted".into(), started),
    })
}

fn conflict_horizon(entry: &EntryState, limits: &KinematicLimits, position: f64) -> TimeWindow {
    let early = entry.t0 + bang_travel_time(entry.v0, limits, position, true);
    let late = entry.t0 + bang_travel_time(entry.v0, limits, position, false);
    TimeWindow::new(early, late).unwrap_or(TimeWindow {
        start: early,
        end: early,
    })
}

/// One idle window per conflict point plus the exit window, chosen by
/// scoring the interpolant through the window midpoints.
pub fn select_convex_sets(
    req: &PlanRequest,
    ledger: &OccupancyLedger,
    layout: &IntersectionLayout,
    options: &OptimizerOptions,
) -> Result<ConvexSelection, SelectionError> {
    let path = layout
        .path(req.path_id)
        .map_err(|e| SelectionError::NoCombination(e.to_string()))?;
    let (t_lo, t_hi) = feasible_exit_range(&req.entry, &req.limits, path.length);
    let exit_lo = match ledger.leader(req.path_id, req.entry.t0) {
        Some(l) => t_lo.max(l.trajectory.t_end + req.params.tau_r),
        None => t_lo,
    };
    let exit_window = TimeWindow::new(exit_lo, t_hi)
        .ok_or_else(|| SelectionError::NoCombination("exit window is empty".into()))?;

    let per_conflict: Vec<Vec<TimeWindow>> = path
        .conflicts
        .iter()
        .map(|c| {
            let horizon = conflict_horizon(&req.entry, &req.limits, c.position);
            idle_windows(ledger, c.conflict_id, horizon, req.params.tau_l)
        })
        .collect();
    if let Some(i) = per_conflict.iter().position(Vec::is_empty) {
        return Err(SelectionError::NoCombination(format!(
            "conflict {} has no idle window",
            path.conflicts[i].conflict_id
        )));
    }

    let mut positions: Vec<f64> = path.conflict_positions().collect();
    positions.push(path.length);
    let exit_seed = exit_window.midpoint();
    let margin = options.ordering_margin;

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut combinations = 0usize;
    let mut chosen = Vec::with_capacity(per_conflict.len());
    let mut times = Vec::with_capacity(per_conflict.len() + 1);
    enumerate(
        &per_conflict,
        req.entry.t0,
        margin,
        &mut chosen,
        &mut times,
        &mut |choice: &[usize], mids: &[f64]| {
            if !(mids.last().copied().unwrap_or(req.entry.t0) + margin < exit_seed) {
                return;
            }
            let mut node_times = mids.to_vec();
            node_times.push(exit_seed);
            let Ok(traj) = interpolate_through(&req.entry, &positions, &node_times) else {
                return;
            };
            combinations += 1;
            let jerk = squared_jerk_integral(&traj);
            if best.as_ref().is_none_or(|(b, _)| jerk < *b) {
                best = Some((jerk, choice.to_vec()));
            }
        },
    );
    let (seed_objective, choice) = best.ok_or_else(|| {
        SelectionError::NoCombination("no ordered combination of window midpoints".into())
    })?;
    let windows: Vec<TimeWindow> = choice
        .iter()
        .zip(&per_conflict)
        .map(|(&i, ws)| ws[i])
        .collect();
    Ok(ConvexSelection {
        seed: NodeTimes {
            crossings: windows.iter().map(TimeWindow::midpoint).collect(),
            exit: exit_seed,
        },
        windows,
        exit_window,
        seed_objective,
        combinations,
    })
}

fn enumerate(
    per_conflict: &[Vec<TimeWindow>],
    previous: f64,
    margin: f64,
    chosen: &mut Vec<usize>,
    mids: &mut Vec<f64>,
    visit: &mut dyn FnMut(&[usize], &[f64]),
) {
    let depth = chosen.len();
    if depth == per_conflict.len() {
        visit(chosen, mids);
        return;
    }
    for (i, w) in per_conflict[depth].iter().enumerate() {
        let mid = w.midpoint();
        if mid <= previous + margin {
            continue;
        }
        chosen.push(i);
        mids.push(mid);
        enumerate(per_conflict, mid, margin, chosen, mids, visit);
        chosen.pop();
        mids.pop();
    }
}

/// Penalised squared-jerk objective over node times.
struct Objective<'a> {
    problem: &'a FallbackProblem,
    options: &'a OptimizerOptions,
    evaluations: usize,
    best_feasible: Option<(f64, Vec<f64>)>,
}

const UNORDERED_PENALTY: f64 = 1e3;

impl<'a> Objective<'a> {
    fn value(&mut self, x: &[f64]) -> f64 {
        self.evaluate(x).0
    }

    /// Penalised objective and whether `x` satisfies every bound.
    fn evaluate(&mut self, x: &[f64]) -> (f64, bool) {
        self.evaluations += 1;
        let weight = self.options.penalty_weight;
        let margin = self.options.ordering_margin;
        let mut disorder = 0.0;
        let mut previous = self.problem.entry.t0;
        for &t in x {
            disorder += (previous + margin - t).max(0.0);
            previous = t;
        }
        if disorder > 0.0 {
            return (weight * (UNORDERED_PENALTY + disorder), false);
        }
        let Some(traj) = quick_interpolant(&self.problem.entry, &self.problem.positions, x) else {
            return (weight * 2.0 * UNORDERED_PENALTY, false);
        };
        let b = extrema_bounds(&traj);
        let l = &self.problem.limits;
        let excess: f64 = [
            l.v_min - b.v_lo,
            b.v_hi - l.v_max,
            l.u_min - b.a_lo,
            b.a_hi - l.u_max,
        ]
        .iter()
        .map(|e| (e - BOUND_TOL).max(0.0))
        .sum();
        let jerk = squared_jerk_integral(&traj);
        let feasible = excess == 0.0;
        if feasible && self.best_feasible.as_ref().is_none_or(|(f, _)| jerk < *f) {
            self.best_feasible = Some((jerk, x.to_vec()));
        }
        (jerk + weight * excess, feasible)
    }
}

/// Same interpolant as [`interpolate_through`], built from divided
/// differences without the dense solve or the residual check. Used inside
/// the optimizer, whose winner is rebuilt with the checked routine.
fn quick_interpolant(
    entry: &EntryState,
    positions: &[f64],
    times: &[f64],
) -> Option<PolyTrajectory> {
    let n = times.len() + 1;
    let t_end = *times.last()?;
    let origin = 0.5 * (entry.t0 + t_end);
    let mut s = Vec::with_capacity(2 * n);
    s.push(entry.t0 - origin);
    s.extend(times.iter().map(|t| t - origin));
    let mut c = Vec::with_capacity(n);
    c.push(entry.p0);
    c.extend_from_slice(positions);
    for j in 1..n {
        for i in (j..n).rev() {
            c[i] = (c[i] - c[i - 1]) / (s[i] - s[i - j]);
        }
    }
    // Newton form to monomials: p = c[n-1], then p = p (s - s_k) + c[k]
    let mut coefficients = vec![0.0; n];
    coefficients[0] = c[n - 1];
    for k in (0..n - 1).rev() {
        for j in (1..n).rev() {
            coefficients[j] = coefficients[j - 1] - s[k] * coefficients[j];
        }
        coefficients[0] = c[k] - s[k] * coefficients[0];
    }
    coefficients
        .iter()
        .all(|v| v.is_finite())
        .then(|| PolyTrajectory::with_origin(coefficients, origin, entry.t0, t_end))
}

fn clamp_into(x: &mut [f64], problem: &FallbackProblem) {
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = xi.clamp(problem.lower[i], problem.upper[i]);
    }
}

fn explore(
    objective: &mut Objective,
    problem: &FallbackProblem,
    base: &[f64],
    f_base: f64,
    steps: &[f64],
) -> (Vec<f64>, f64) {
    let mut x = base.to_vec();
    let mut fx = f_base;
    for i in 0..x.len() {
        if steps[i] == 0.0 {
            continue;
        }
        for dir in [1.0, -1.0] {
            let mut candidate = x.clone();
            candidate[i] =
                (candidate[i] + dir * steps[i]).clamp(problem.lower[i], problem.upper[i]);
            if candidate[i] == x[i] {
                continue;
            }
            let fc = objective.value(&candidate);
            if fc < fx {
                x = candidate;
                fx = fc;
                break;
            }
        }
    }
    (x, fx)
}

/// Polls `base +- s_i e_i +- s_j e_j` for every pair of axes. Used when the
/// coordinate poll fails, so the search can slide along a bound that is
/// not aligned with an axis.
fn explore_diagonal(
    objective: &mut Objective,
    problem: &FallbackProblem,
    base: &[f64],
    f_base: f64,
    steps: &[f64],
) -> Option<(Vec<f64>, f64)> {
    for i in 0..base.len() {
        for j in i + 1..base.len() {
            if steps[i] == 0.0 || steps[j] == 0.0 {
                continue;
            }
            for (di, dj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut candidate = base.to_vec();
                candidate[i] += di * steps[i];
                candidate[j] += dj * steps[j];
                clamp_into(&mut candidate, problem);
                if candidate == base {
                    continue;
                }
                let fc = objective.value(&candidate);
                if fc < f_base {
                    return Some((candidate, fc));
                }
            }
        }
    }
    None
}

/// Damped Newton step on a finite-difference quadratic model around `base`.
///
/// Only axes that can move by the difference step in both directions take
/// part, and the model is abandoned if any sample violates a bound, since
/// the penalty kink would make it meaningless. Returns the first improving
/// point along the step, halved up to three times.
fn model_step(
    objective: &mut Objective,
    problem: &FallbackProblem,
    base: &[f64],
    f_base: f64,
    steps: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let h: Vec<f64> = steps.iter().map(|s| s.min(1e-3)).collect();
    let free: Vec<usize> = (0..base.len())
        .filter(|&i| {
            h[i] > 1e-7 && base[i] - h[i] >= problem.lower[i] && base[i] + h[i] <= problem.upper[i]
        })
        .collect();
    let m = free.len();
    if m == 0 {
        return None;
    }
    let sample = |objective: &mut Objective, moves: &[(usize, f64)]| {
        let mut x = base.to_vec();
        for &(i, d) in moves {
            x[i] += d;
        }
        let (f, feasible) = objective.evaluate(&x);
        feasible.then_some(f)
    };
    let mut gradient = vec![0.0; m];
    let mut hessian = vec![vec![0.0; m]; m];
    for (a, &i) in free.iter().enumerate() {
        let plus = sample(objective, &[(i, h[i])])?;
        let minus = sample(objective, &[(i, -h[i])])?;
        gradient[a] = (plus - minus) / (2.0 * h[i]);
        hessian[a][a] = (plus - 2.0 * f_base + minus) / (h[i] * h[i]);
    }
    for a in 0..m {
        for b in a + 1..m {
            let (i, j) = (free[a], free[b]);
            let pp = sample(objective, &[(i, h[i]), (j, h[j])])?;
            let pm = sample(objective, &[(i, h[i]), (j, -h[j])])?;
            let mp = sample(objective, &[(i, -h[i]), (j, h[j])])?;
            let mm = sample(objective, &[(i, -h[i]), (j, -h[j])])?;
            let hij = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hessian[a][b] = hij;
            hessian[b][a] = hij;
        }
    }
    let scale = hessian
        .iter()
        .enumerate()
        .map(|(a, row)| row[a].abs())
        .fold(0.0, f64::max);
    let rhs: Vec<f64> = gradient.iter().map(|g| -g).collect();
    let mut damping = 0.0;
    let direction = loop {
        let damped: Vec<Vec<f64>> = hessian
            .iter()
            .enumerate()
            .map(|(a, row)| {
                let mut row = row.clone();
                row[a] += damping;
                row
            })
            .collect();
        if let Some(d) = solve_dense(&damped, &rhs) {
            let slope: f64 = d.iter().zip(&gradient).map(|(d, g)| d * g).sum();
            if slope < 0.0 {
                break d;
            }
        }
        damping = if damping == 0.0 {
            1e-6 * scale.max(1e-12)
        } else {
            damping * 10.0
        };
        if damping > 1e6 * scale.max(1e-12) {
            return None;
        }
    };
    let mut alpha = 1.0;
    for _ in 0..4 {
        let mut x = base.to_vec();
        for (a, &i) in free.iter().enumerate() {
            x[i] += alpha * direction[a];
        }
        clamp_into(&mut x, problem);
        if x.as_slice() != base {
            let f = objective.value(&x);
            if f < f_base {
                return Some((x, f));
            }
        }
        alpha *= 0.5;
    }
    None
}

/// Hooke-Jeeves pattern search inside the box.
fn pattern_search(
    objective: &mut Objective,
    problem: &FallbackProblem,
    start: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> (Vec<f64>, f64) {
    let mut base = start.to_vec();
    clamp_into(&mut base, problem);
    let mut f_base = objective.value(&base);
    let mut steps: Vec<f64> = problem
        .lower
        .iter()
        .zip(&problem.upper)
        .map(|(lo, hi)| 0.25 * (hi - lo))
        .collect();
    // every exploratory pass, including those after pattern moves, counts
    let mut iterations = 0;
    while iterations < max_iterations && steps.iter().any(|&s| s > tolerance) {
        iterations += 1;
        if let Some((xm, fm)) = model_step(objective, problem, &base, f_base, &steps) {
            let gain = f_base - fm;
            base = xm;
            f_base = fm;
            // keep stepping while the model pays off, poll once it stalls
            if gain > MODEL_STALL * fm.abs() {
                continue;
            }
        }
        let (mut x, mut fx) = explore(objective, problem, &base, f_base, &steps);
        if fx >= f_base {
            if let Some((xd, fd)) = explore_diagonal(objective, problem, &base, f_base, &steps) {
                x = xd;
                fx = fd;
            }
        }
        if fx < f_base {
            loop {
                let mut pattern: Vec<f64> = x.iter().zip(&base).map(|(a, b)| 2.0 * a - b).collect();
                clamp_into(&mut pattern, problem);
                base = x.clone();
                f_base = fx;
                if iterations >= max_iterations {
                    break;
                }
                iterations += 1;
                let f_pattern = objective.value(&pattern);
                let (x2, f2) = explore(objective, problem, &pattern, f_pattern, &steps);
                if f2 < f_base {
                    x = x2;
                    fx = f2;
                } else {
                    break;
                }
            }
        } else {
            for s in &mut steps {
                *s *= 0.5;
            }
        }
    }
    (base, f_base)
}

/// Upper bound on the number of coarse-grid points evaluated.
const GRID_BUDGET: usize = 5000;

/// Pattern size of the first, coarse round of local searches (s).
/// Relative gain below which a model step is followed by a poll.
const MODEL_STALL: f64 = 1e-6;
/// Iteration cap per start in the coarse phase.
const COARSE_ITERATIONS: usize = 60;
const COARSE_TOLERANCE: f64 = 1e-2;

/// Minimum-jerk node times inside the box, starting from `seed`.
///
/// A coarse grid over the box supplies further starts: its best points
/// overall and the best feasible point in each orthant of the box, so that
/// separate basins all get a start. Every start gets a short local search;
/// the most promising ones are then refined to full tolerance. The result
/// is the best bounds-feasible point evaluated, so it never scores worse
/// than a feasible seed.
pub fn optimize_node_times(
    problem: &FallbackProblem,
    seed: &NodeTimes,
    options: &OptimizerOptions,
) -> Result<OptimizedNodes, FallbackInfeasible> {
    let mut objective = Objective {
        problem,
        options,
        evaluations: 0,
        best_feasible: None,
    };
    let mut starts = vec![seed.to_vec()];

    let n = problem.dimension();
    let mut g = options.grid_points;
    while g > 2 && (g as f64).powi(n as i32) > GRID_BUDGET as f64 {
        g -= 1;
    }
    if g >= 2 {
        let mut scored: Vec<(f64, bool, usize, Vec<f64>)> = Vec::new();
        let mut index = vec![0usize; n];
        'grid: loop {
            let x: Vec<f64> = (0..n)
                .map(|i| {
                    let (lo, hi) = (problem.lower[i], problem.upper[i]);
                    lo + (hi - lo) * index[i] as f64 / (g - 1) as f64
                })
                .collect();
            let orthant = (0..n).fold(0, |acc, i| (acc << 1) | usize::from(2 * index[i] >= g));
            let (f, feasible) = objective.evaluate(&x);
            scored.push((f, feasible, orthant, x));
            for i in 0..n {
                index[i] += 1;
                if index[i] < g {
                    continue 'grid;
                }
                index[i] = 0;
            }
            break;
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        starts.extend(
            scored
                .iter()
                .take(options.extra_starts)
                .map(|s| s.3.clone()),
        );
        let mut seen = std::collections::BTreeSet::new();
        for (_, feasible, orthant, x) in &scored {
            if *feasible && seen.insert(*orthant) {
                starts.push(x.clone());
            }
        }
        starts.dedup();
    }

    let coarse = COARSE_TOLERANCE.max(options.tolerance);
    let mut rounds: Vec<(f64, Vec<f64>)> = starts
        .iter()
        .map(|start| {
            let (x, f) = pattern_search(
                &mut objective,
                problem,
                start,
                coarse,
                COARSE_ITERATIONS.min(options.max_iterations),
            );
            (f, x)
        })
        .collect();
    rounds.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, x) in rounds.iter().take(options.refine_starts.max(1)) {
        pattern_search(
            &mut objective,
            problem,
            x,
            options.tolerance,
            options.max_iterations,
        );
    }

    let evaluations = objective.evaluations;
    let (value, x) = objective
        .best_feasible
        .ok_or(FallbackInfeasible { evaluations })?;
    let trajectory = interpolate_through(&problem.entry, &problem.positions, &x)
        .map_err(|_| FallbackInfeasible { evaluations })?;
    Ok(OptimizedNodes {
        nodes: NodeTimes::from_slice(&x),
        trajectory,
        objective: value,
        evaluations,
    })
}

/// Plans one vehicle and, on success, commits it to the ledger.
///
/// Infeasible requests leave the ledger untouched.
pub fn plan(
    req: &PlanRequest,
    ledger: &mut OccupancyLedger,
    layout: &IntersectionLayout,
    options: &PlannerOptions,
) -> Result<PlanResult, PlanError> {
    if !(options.scan_step > 0.0) {
        return Err(PlanError::ScanStep(options.scan_step));
    }
    let started = Instant::now();
    let mut diagnostics = Diagnostics::default();
    let outcome = {
        let ctx = Context::new(req, ledger, layout, options.rear_end_step)?;
        match ctx.scan(options.scan_step, &mut diagnostics) {
            Some((traj, _)) => Ok((PlanStatus::Cubic, traj)),
            None => fallback(&ctx, layout, options, &mut diagnostics)
                .map(|t| (PlanStatus::QuarticFallback, t)),
        }
        // defensive re-check of whatever is about to be committed
        .and_then(|(status, traj)| Ok((status, ctx.verify(&traj)?, traj)))
    };
    match outcome {
        Ok((status, crossings, traj)) => {
            diagnostics.entry_speed_jump =
                Some((traj.kinematics_at(req.entry.t0).v - req.entry.v0).abs());
            ledger.commit(req.vehicle_id, req.path_id, traj.clone(), &crossings);
            Ok(PlanResult {
                vehicle_id: req.vehicle_id,
                path_id: req.path_id,
                status,
                exit_time: Some(traj.t_end),
                trajectory: Some(traj),
                crossing_times: crossings,
                diagnostics,
                solve_seconds: started.elapsed().as_secs_f64(),
            })
        }
        Err(reason) => Ok(infeasible(req, diagnostics, reason, started)),
    }
}

fn fallback(
    ctx: &Context,
    layout: &IntersectionLayout,
    options: &PlannerOptions,
    diagnostics: &mut Diagnostics,
) -> Result<PolyTrajectory, String> {
    let req = ctx.req;
    let selection = select_convex_sets(req, ctx.ledger, layout, &options.optimizer)
        .map_err(|e| e.to_string())?;
    diagnostics.combinations = selection.combinations;
    diagnostics.seed_objective = Some(selection.seed_objective);
    let mut problem = FallbackProblem::from_selection(req, ctx.path, &selection);
    let mut seed = selection.seed.clone();

    for round in 0..2 {
        let result = optimize_node_times(&problem, &seed, &options.optimizer);
        let evaluations = result
            .as_ref()
            .map_or_else(|e| e.evaluations, |r| r.evaluations);
        diagnostics.optimizer_evaluations += evaluations;
        let optimized = result.map_err(|e| e.to_string())?;
        diagnostics.fallback_objective = Some(optimized.objective);
        match ctx.rear_end_clear(&optimized.trajectory) {
            Ok(()) => return Ok(optimized.trajectory),
            Err(reason) if round == 1 => return Err(reason),
            Err(_) => {}
        }
        // one tightening round: every node at least tau_r behind the leader
        let Some(leader) = ctx.leader else {
            return Err("rear-end headway to follower violated".into());
        };
        diagnostics.rear_end_tightened = true;
        for (i, &p) in problem.positions.iter().enumerate() {
            let behind = invert_position(&leader.trajectory, p).map_err(|e| e.to_string())?
                + req.params.tau_r;
            problem.lower[i] = problem.lower[i].max(behind);
            if problem.lower[i] > problem.upper[i] {
                return Err("tightened window is empty".into());
            }
        }
        let mut x = seed.to_vec();
        clamp_into(&mut x, &problem);
        seed = NodeTimes::from_slice(&x);
    }
    unreachable!("the loop returns on its second round")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::audit;
    use crate::geometry::{ConflictPosition, PathDescriptor};

    fn limits() -> KinematicLimits {
        KinematicLimits::new(1.0, 15.0, -3.0, 3.0).unwrap()
    }

    fn params() -> SafetyParams {
        SafetyParams {
            tau_r: 2.0,
            tau_l: 1.0,
        }
    }

    #[test]
    fn quick_interpolant_matches_checked_one() {
        let entry = EntryState {
            t0: 250.0,
            p0: 0.0,
            v0: 10.0,
        };
        let positions = [40.0, 50.0, 60.0, 100.0];
        let times = [254.1, 255.3, 256.2, 260.7];
        let a = quick_interpolant(&entry, &positions, &times).unwrap();
        let b = interpolate_through(&entry, &positions, &times).unwrap();
        for k in 0..=40 {
            let t = 250.0 + 10.7 * k as f64 / 40.0;
            let (ka, kb) = (a.kinematics_at(t), b.kinematics_at(t));
            assert!(
                (ka.p - kb.p).abs() < 1e-9 && (ka.a - kb.a).abs() < 1e-9,
                "{t}"
            );
        }
        assert!((squared_jerk_integral(&a) - squared_jerk_integral(&b)).abs() < 1e-9);
    }

    fn request(vehicle_id: VehicleId, path_id: PathId, t0: f64, v0: f64) -> PlanRequest {
        PlanRequest {
            vehicle_id,
            path_id,
            entry: EntryState { t0, p0: 0.0, v0 },
            limits: limits(),
            params: params(),
        }
    }

    fn crossing_layout() -> IntersectionLayout {
        let path = |path_id| PathDescriptor {
            path_id,
            length: 100.0,
            conflicts: vec![ConflictPosition {
                conflict_id: 0,
                position: 50.0,
            }],
        };
        IntersectionLayout::new(vec![path(1), path(2)]).unwrap()
    }

    #[test]
    fn empty_road_is_cubic() {
        let layout = IntersectionLayout::four_leg_12path();
        let mut ledger = OccupancyLedger::new();
        let r = plan(
            &request(1, 5, 0.0, 10.0),
            &mut ledger,
            &layout,
            &PlannerOptions::default(),
        )
        .unwrap();
        assert_eq!(r.status, PlanStatus::Cubic);
        let (lo, _) = feasible_exit_range(&request(1, 5, 0.0, 10.0).entry, &limits(), 100.0);
        let exit = r.exit_time.unwrap();
        assert!(exit >= lo && exit <= lo + 2.0, "{exit} vs {lo}");
        assert_eq!(ledger.vehicle_count(), 1);
        assert_eq!(r.crossing_times.len(), 3);
    }

    #[test]
    fn scan_does_not_commit() {
        let layout = crossing_layout();
        let ledger = OccupancyLedger::new();
        let r = plan_cubic_scan(&request(1, 1, 0.0, 10.0), &ledger, &layout, 0.1).unwrap();
        assert_eq!(r.status, PlanStatus::Cubic);
        assert!(ledger.is_empty());
        assert!(plan_cubic_scan(&request(1, 1, 0.0, 10.0), &ledger, &layout, 0.0).is_err());
    }

    #[test]
    fn blocker_delays_exit() {
        let layout = crossing_layout();
        let empty = OccupancyLedger::new();
        let free = plan_cubic_scan(&request(1, 1, 0.0, 10.0), &empty, &layout, 0.1).unwrap();
        let t_cross = free.crossing_times[0].1;
        let mut ledger = OccupancyLedger::new();
        let other =
            PolyTrajectory::with_origin(vec![-50.0, 10.0], t_cross, t_cross - 5.0, t_cross + 5.0);
        ledger.commit(9, 2, other, &[(0, t_cross)]);
        let blocked = plan_cubic_scan(&request(1, 1, 0.0, 10.0), &ledger, &layout, 0.1).unwrap();
        assert_eq!(blocked.status, PlanStatus::Cubic);
        assert!(blocked.exit_time.unwrap() > free.exit_time.unwrap());
        assert!((blocked.crossing_times[0].1 - t_cross).abs() >= 1.0);
    }

    fn saturate(
        ledger: &mut OccupancyLedger,
        conflict: ConflictId,
        from: f64,
        to: f64,
        spacing: f64,
        first_id: VehicleId,
    ) {
        let mut t = from;
        let mut id = first_id;
        while t <= to {
            let traj = PolyTrajectory::with_origin(vec![-50.0, 10.0], t, t - 5.0, t + 5.0);
            ledger.commit(id, 2, traj, &[(conflict, t)]);
            t += spacing;
            id += 1;
        }
    }

    #[test]
    fn saturated_conflict_is_infeasible_and_rolls_back() {
        let layout = crossing_layout();
        let mut ledger = OccupancyLedger::new();
        // crossings every 2 tau_l leave no idle time at the conflict
        saturate(&mut ledger, 0, -10.0, 200.0, 2.0, 100);
        let before = serde_json::to_vec(&ledger).unwrap();
        let scan = plan_cubic_scan(&request(1, 1, 0.0, 10.0), &ledger, &layout, 0.1).unwrap();
        assert_eq!(scan.status, PlanStatus::Infeasible);
        let r = plan(
            &request(1, 1, 0.0, 10.0),
            &mut ledger,
            &layout,
            &PlannerOptions::default(),
        )
        .unwrap();
        assert_eq!(r.status, PlanStatus::Infeasible);
        assert!(r.trajectory.is_none());
        assert_eq!(serde_json::to_vec(&ledger).unwrap(), before);
    }

    #[test]
    fn single_window_combination() {
        let layout = crossing_layout();
        let ledger = OccupancyLedger::new();
        let req = request(1, 1, 0.0, 10.0);
        let sel = select_convex_sets(&req, &ledger, &layout, &OptimizerOptions::default()).unwrap();
        assert_eq!(sel.windows.len(), 1);
        assert_eq!(sel.combinations, 1);
        assert_eq!(sel.seed.crossings, vec![sel.windows[0].midpoint()]);
        assert_eq!(sel.seed.exit, sel.exit_window.midpoint());
    }

    #[test]
    fn ordering_filter_picks_the_ordered_window() {
        // path with two conflicts; the second conflict only has late idle time,
        // the first has an early and a very late window.
        let layout = IntersectionLayout::new(vec![
            PathDescriptor {
                path_id: 1,
                length: 100.0,
                conflicts: vec![
                    ConflictPosition {
                        conflict_id: 0,
                        position: 40.0,
                    },
                    ConflictPosition {
                        conflict_id: 1,
                        position: 60.0,
                    },
                ],
            },
            PathDescriptor {
                path_id: 2,
                length: 100.0,
                conflicts: vec![
                    ConflictPosition {
                        conflict_id: 0,
                        position: 40.0,
                    },
                    ConflictPosition {
                        conflict_id: 1,
                        position: 60.0,
                    },
                ],
            },
        ])
        .unwrap();
        let req = request(1, 1, 0.0, 10.0);
        let mut ledger = OccupancyLedger::new();
        // conflict 0: idle early and after ~28 s; conflict 1: idle only late
        saturate(&mut ledger, 0, 5.0, 27.0, 2.0, 100);
        saturate(&mut ledger, 1, 2.0, 15.0, 2.0, 200);
        let sel = select_convex_sets(&req, &ledger, &layout, &OptimizerOptions::default()).unwrap();
        assert!(sel.seed.crossings[0] < sel.seed.crossings[1]);
        assert!(sel.windows[0].end <= 4.0 + 1e-9, "{:?}", sel.windows);
    }

    #[test]
    fn degenerate_box_returns_seed() {
        let entry = EntryState {
            t0: 0.0,
            p0: 0.0,
            v0: 10.0,
        };
        let seed = NodeTimes {
            crossings: vec![4.0, 5.0, 6.0],
            exit: 10.0,
        };
        let problem = FallbackProblem {
            entry,
            limits: limits(),
            positions: vec![40.0, 50.0, 60.0, 100.0],
            lower: seed.to_vec(),
            upper: seed.to_vec(),
        };
        let out = optimize_node_times(&problem, &seed, &OptimizerOptions::default()).unwrap();
        assert_eq!(out.nodes, seed);
        assert!(out.objective < 1e-12);
    }

    #[test]
    fn impossible_box_is_infeasible() {
        let entry = EntryState {
            t0: 0.0,
            p0: 0.0,
            v0: 10.0,
        };
        // 40 m in under half a second needs > 80 m/s
        let problem = FallbackProblem {
            entry,
            limits: limits(),
            positions: vec![40.0, 50.0, 60.0, 100.0],
            lower: vec![0.2, 0.5, 0.8, 1.2],
            upper: vec![0.4, 0.7, 1.0, 1.5],
        };
        let seed = NodeTimes {
            crossings: vec![0.3, 0.6, 0.9],
            exit: 1.35,
        };
        assert!(optimize_node_times(&problem, &seed, &OptimizerOptions::default()).is_err());
    }

    #[test]
    fn optimizer_improves_on_feasible_seed() {
        let entry = EntryState {
            t0: 0.0,
            p0: 0.0,
            v0: 10.0,
        };
        let problem = FallbackProblem {
            entry,
            limits: limits(),
            positions: vec![40.0, 50.0, 60.0, 100.0],
            lower: vec![3.9, 5.1, 6.5, 13.0],
            upper: vec![4.9, 6.1, 7.5, 14.5],
        };
        // close to p = 10 t - 0.2 t^2, but not on it
        let seed = NodeTimes {
            crossings: vec![4.4, 5.6, 7.0],
            exit: 13.8,
        };
        let seed_traj = interpolate_through(&entry, &problem.positions, &seed.to_vec()).unwrap();
        assert!(check_state_bounds(&seed_traj, &limits()).is_none());
        let out = optimize_node_times(&problem, &seed, &OptimizerOptions::default()).unwrap();
        assert!(squared_jerk_integral(&seed_traj) > 1e-3);
        assert!(out.objective < 0.5 * squared_jerk_integral(&seed_traj));
        assert!(check_state_bounds(&out.trajectory, &limits()).is_none());
        for (t, p) in out.nodes.to_vec().iter().zip(&problem.positions) {
            assert!((out.trajectory.position_at(*t) - p).abs() < 1e-8);
        }
    }

    #[test]
    fn planning_is_deterministic() {
        let layout = IntersectionLayout::four_leg_12path();
        let run = || {
            let mut ledger = OccupancyLedger::new();
            let mut out = Vec::new();
            for (i, (path, t0)) in [(2, 0.0), (5, 0.3), (8, 0.6), (11, 0.9), (2, 4.0), (1, 1.0)]
                .iter()
                .enumerate()
            {
                out.push(
                    plan(
                        &request(i as u64 + 1, *path, *t0, 10.0),
                        &mut ledger,
                        &layout,
                        &PlannerOptions::default(),
                    )
                    .unwrap(),
                );
            }
            (out, ledger)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_plan(y)));
        assert_eq!(la, lb);
        assert!(audit(&la, &layout, &params(), &limits()).is_empty());
    }

    #[test]
    fn interpolation_from_time_zero() {
        let entry = EntryState {
            t0: 0.0,
            p0: 0.0,
            v0: 10.0,
        };
        let traj = interpolate_through(&entry, &[40.0, 50.0, 60.0, 100.0], &[4.0, 5.0, 6.0, 10.0])
            .unwrap();
        assert_eq!(traj.t_start, 0.0);
        assert_eq!(traj.t_end, 10.0);
        assert!((traj.kinematics_at(0.0).v - 10.0).abs() < 1e-9);
        assert!(squared_jerk_integral(&traj) < 1e-12);
    }
}
