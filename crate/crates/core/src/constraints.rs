//! Safety semantics over committed plans: the occupancy ledger, speed and
//! input bound checks, rear-end headway, crossing-time separation at
//! conflict points, idle windows and an independent audit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{ConflictId, IntersectionLayout, PathId};
use crate::trajectory::{
    extrema_with_times, invert_position, KinematicLimits, PolyTrajectory, TrajectoryError,
};

pub type VehicleId = u64;

/// Slack on speed and input bounds.
pub const BOUND_TOL: f64 = 1e-9;
/// Slack on rear-end time gaps.
pub const REAR_END_TOL: f64 = 1e-9;
/// Slack on crossing-time separation. Crossing times that sit exactly on an
/// idle-window edge are recovered by inversion, which is accurate to ~1e-9 s.
pub const LATERAL_TOL: f64 = 1e-7;
/// Default position resolution of rear-end checks (m).
pub const DEFAULT_REAR_END_STEP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyParams {
    /// Rear-end time headway (s).
    pub tau_r: f64,
    /// Lateral time headway at conflict points (s).
    pub tau_l: f64,
}

/// Whether `tau_r >= 2 tau_l`, which leaves room for a vehicle from a
/// conflicting path to pass between two consecutive same-path vehicles.
pub fn gap_guarantee_holds(params: &SafetyParams) -> bool {
    params.tau_r >= 2.0 * params.tau_l
}

/// Closed time interval with `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Option<Self> {
        (start < end).then_some(Self { start, end })
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommittedCrossing {
    pub vehicle_id: VehicleId,
    pub path_id: PathId,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittedTrajectory {
    pub vehicle_id: VehicleId,
    pub trajectory: PolyTrajectory,
}

/// Everything the coordinator has promised so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OccupancyLedger {
    /// Per conflict point, crossings sorted by time.
    pub crossings: BTreeMap<ConflictId, Vec<CommittedCrossing>>,
    /// Per path, trajectories in entry order.
    pub path_trajectories: BTreeMap<PathId, Vec<CommittedTrajectory>>,
}

impl OccupancyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.path_trajectories.values().all(Vec::is_empty)
    }

    pub fn vehicle_count(&self) -> usize {
        self.path_trajectories.values().map(Vec::len).sum()
    }

    pub fn commit(
        &mut self,
        vehicle_id: VehicleId,
        path_id: PathId,
        trajectory: PolyTrajectory,
        crossings: &[(ConflictId, f64)],
    ) {
        for &(conflict_id, time) in crossings {
            let list = self.crossings.entry(conflict_id).or_default();
            let at = list.partition_point(|c| c.time <= time);
            list.insert(
                at,
                CommittedCrossing {
                    vehicle_id,
                    path_id,
                    time,
                },
            );
        }
        let list = self.path_trajectories.entry(path_id).or_default();
        let at = list.partition_point(|c| c.trajectory.t_start <= trajectory.t_start);
        list.insert(
            at,
            CommittedTrajectory {
                vehicle_id,
                trajectory,
            },
        );
    }

    pub fn crossings_at(&self, conflict_id: ConflictId) -> &[CommittedCrossing] {
        self.crossings
            .get(&conflict_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn on_path(&self, path_id: PathId) -> &[CommittedTrajectory] {
        self.path_trajectories
            .get(&path_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Last vehicle on `path_id` that entered no later than `t0`.
    pub fn leader(&self, path_id: PathId, t0: f64) -> Option<&CommittedTrajectory> {
        self.on_path(path_id)
            .iter()
            .rev()
            .find(|c| c.trajectory.t_start <= t0)
    }

    /// First vehicle on `path_id` that entered after `t0`.
    pub fn follower(&self, path_id: PathId, t0: f64) -> Option<&CommittedTrajectory> {
        self.on_path(path_id)
            .iter()
            .find(|c| c.trajectory.t_start > t0)
    }

    pub fn trajectories(&self) -> impl Iterator<Item = (PathId, &CommittedTrajectory)> {
        self.path_trajectories
            .iter()
            .flat_map(|(&p, list)| list.iter().map(move |c| (p, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    RearEnd,
    Lateral,
    SpeedBound,
    AccelBound,
    NonMonotone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub vehicle_ids: Vec<VehicleId>,
    /// Time (bounds, lateral) or position (rear-end) of the worst breach.
    pub at: f64,
    /// Amount by which the constraint failed; always positive.
    pub margin: f64,
}

/// Every speed and input bound the trajectory breaks: lower then upper
/// speed, lower then upper acceleration, each at its worst instant.
pub fn state_bound_violations(traj: &PolyTrajectory, limits: &KinematicLimits) -> Vec<Violation> {
    let (b, at) = extrema_with_times(traj);
    let candidates = [
        (ViolationKind::SpeedBound, limits.v_min - b.v_lo, at.v_lo),
        (ViolationKind::SpeedBound, b.v_hi - limits.v_max, at.v_hi),
        (ViolationKind::AccelBound, limits.u_min - b.a_lo, at.a_lo),
        (ViolationKind::AccelBound, b.a_hi - limits.u_max, at.a_hi),
    ];
    candidates
        .into_iter()
        .filter(|&(_, margin, _)| margin > BOUND_TOL)
        .map(|(kind, margin, at)| Violation {
            kind,
            vehicle_ids: Vec::new(),
            at,
            margin,
        })
        .collect()
}

/// `None` when speed and input stay within `limits` over the whole domain.
pub fn check_state_bounds(traj: &PolyTrajectory, limits: &KinematicLimits) -> Option<Violation> {
    state_bound_violations(traj, limits).into_iter().next()
}

/// Leader passage times sampled along the position axis, reusable across
/// many candidate followers.
#[derive(Debug, Clone)]
pub struct RearEndProfile {
    samples: Vec<(f64, f64)>,
}

impl RearEndProfile {
    pub fn new(leader: &PolyTrajectory, position_step: f64) -> Result<Self, TrajectoryError> {
        assert!(position_step > 0.0, "position step must be positive");
        let lo = leader.position_at(leader.t_start);
        let hi = leader.position_at(leader.t_end);
        if hi < lo {
            return Err(TrajectoryError::NotMonotone);
        }
        let count = ((hi - lo) / position_step).ceil() as usize;
        let mut samples = Vec::with_capacity(count + 1);
        for i in 0..=count {
            let p = (lo + i as f64 * position_step).min(hi);
            samples.push((p, invert_position(leader, p)?));
        }
        Ok(Self { samples })
    }

    /// Smallest `t_follower(p) - t_leader(p)` over the common span, with
    /// the position where it occurs.
    pub fn min_gap(
        &self,
        follower: &PolyTrajectory,
    ) -> Result<Option<(f64, f64)>, TrajectoryError> {
        let lo = follower.position_at(follower.t_start);
        let hi = follower.position_at(follower.t_end);
        if hi < lo {
            return Err(TrajectoryError::NotMonotone);
        }
        let mut worst: Option<(f64, f64)> = None;
        for &(p, t_leader) in self.samples.iter().filter(|(p, _)| *p >= lo && *p <= hi) {
            let gap = invert_position(follower, p)? - t_leader;
            if worst.is_none_or(|(g, _)| gap < g) {
                worst = Some((gap, p));
            }
        }
        Ok(worst)
    }

    pub fn check(
        &self,
        follower: &PolyTrajectory,
        tau_r: f64,
    ) -> Result<Option<Violation>, TrajectoryError> {
        Ok(self.min_gap(follower)?.and_then(|(gap, p)| {
            (gap < tau_r - REAR_END_TOL).then(|| Violation {
                kind: ViolationKind::RearEnd,
                vehicle_ids: Vec::new(),
                at: p,
                margin: tau_r - gap,
            })
        }))
    }
}

/// The follower must reach every common position at least `tau_r` after
/// the leader. Positions are sampled every `position_step` metres.
pub fn check_rear_end(
    follower: &PolyTrajectory,
    leader: &PolyTrajectory,
    tau_r: f64,
    position_step: f64,
) -> Result<Option<Violation>, TrajectoryError> {
    RearEndProfile::new(leader, position_step)?.check(follower, tau_r)
}

/// Maximal sub-intervals of `horizon` at least `tau_l` away from every
/// committed crossing of `conflict_id`.
pub fn idle_windows(
    ledger: &OccupancyLedger,
    conflict_id: ConflictId,
    horizon: TimeWindow,
    tau_l: f64,
) -> Vec<TimeWindow> {
    let times: Vec<f64> = ledger
        .crossings_at(conflict_id)
        .iter()
        .map(|c| c.time)
        .collect();
    complement_of_blocks(&times, horizon, tau_l)
}

pub(crate) fn complement_of_blocks(
    times: &[f64],
    horizon: TimeWindow,
    tau_l: f64,
) -> Vec<TimeWindow> {
    let mut blocks: Vec<(f64, f64)> = times.iter().map(|&t| (t - tau_l, t + tau_l)).collect();
    blocks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut windows = Vec::new();
    let mut cursor = horizon.start;
    for (lo, hi) in blocks {
        if lo > cursor {
            if let Some(w) = TimeWindow::new(cursor, lo.min(horizon.end)) {
                windows.push(w);
            }
        }
        cursor = cursor.max(hi);
        if cursor >= horizon.end {
            return windows;
        }
    }
    windows.extend(TimeWindow::new(cursor, horizon.end));
    windows
}

/// Re-derives every constraint from the committed trajectories alone and
/// reports each breach. An empty result certifies the ledger.
pub fn audit(
    ledger: &OccupancyLedger,
    layout: &IntersectionLayout,
    params: &SafetyParams,
    limits: &KinematicLimits,
) -> Vec<Violation> {
    audit_with_step(ledger, layout, params, limits, DEFAULT_REAR_END_STEP)
}

pub fn audit_with_step(
    ledger: &OccupancyLedger,
    layout: &IntersectionLayout,
    params: &SafetyParams,
    limits: &KinematicLimits,
    position_step: f64,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let non_monotone = |ids: Vec<VehicleId>, at: f64, err: TrajectoryError| Violation {
        kind: ViolationKind::NonMonotone,
        vehicle_ids: ids,
        at,
        margin: match err {
            TrajectoryError::OutOfRange { p, p_start, p_end } => (p_start - p).max(p - p_end),
            _ => 0.0,
        }
        .max(f64::EPSILON),
    };

    for (_, c) in ledger.trajectories() {
        for mut v in state_bound_violations(&c.trajectory, limits) {
            v.vehicle_ids = vec![c.vehicle_id];
            out.push(v);
        }
    }

    for list in ledger.path_trajectories.values() {
        for pair in list.windows(2) {
            let (leader, follower) = (&pair[0], &pair[1]);
            let ids = vec![leader.vehicle_id, follower.vehicle_id];
            match check_rear_end(
                &follower.trajectory,
                &leader.trajectory,
                params.tau_r,
                position_step,
            ) {
                Ok(Some(mut v)) => {
                    v.vehicle_ids = ids;
                    out.push(v);
                }
                Ok(None) => {}
                Err(e) => out.push(non_monotone(ids, follower.trajectory.t_start, e)),
            }
        }
    }

    for entries in layout.conflict_map().values() {
        let mut passages: Vec<(f64, VehicleId, PathId)> = Vec::new();
        for entry in entries {
            for c in ledger.on_path(entry.path_id) {
                match invert_position(&c.trajectory, entry.position) {
                    Ok(t) => passages.push((t, c.vehicle_id, entry.path_id)),
                    Err(e) => out.push(non_monotone(vec![c.vehicle_id], c.trajectory.t_start, e)),
                }
            }
        }
        passages.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (i, &(t_i, id_i, path_i)) in passages.iter().enumerate() {
            for &(t_j, id_j, path_j) in &passages[i + 1..] {
                let gap = t_j - t_i;
                if gap >= params.tau_l - LATERAL_TOL {
                    break;
                }
                if path_i != path_j && id_i != id_j {
                    out.push(Violation {
                        kind: ViolationKind::Lateral,
                        vehicle_ids: vec![id_i, id_j],
                        at: t_i,
                        margin: params.tau_l - gap,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ConflictPosition, PathDescriptor};
    use proptest::prelude::*;

    fn limits() -> KinematicLimits {
        KinematicLimits::new(1.0, 15.0, -3.0, 3.0).unwrap()
    }

    fn line(speed: f64, t0: f64, length: f64) -> PolyTrajectory {
        PolyTrajectory::with_origin(vec![0.0, speed], t0, t0, t0 + length / speed)
    }

    #[test]
    fn bounds_examples() {
        let flat = PolyTrajectory::new(vec![0.0, 10.0, 0.0, 0.0], 0.0, 10.0);
        assert_eq!(check_state_bounds(&flat, &limits()), None);

        let cubic = PolyTrajectory::new(vec![0.0, 10.0, 0.46875, -0.01953125], 0.0, 8.0);
        let tight = KinematicLimits::new(1.0, 12.0, -3.0, 3.0).unwrap();
        let v = check_state_bounds(&cubic, &tight).unwrap();
        assert_eq!(v.kind, ViolationKind::SpeedBound);
        assert!((v.margin - 1.75).abs() < 1e-12);
        assert!((v.at - 8.0).abs() < 1e-12);

        let quartic = PolyTrajectory::new(vec![0.0, 0.0, 0.0, 0.0, 1.0], 0.0, 1.0);
        let roomy = KinematicLimits::new(1e-3, 15.0, -3.0, 3.0).unwrap();
        let all = state_bound_violations(&quartic, &roomy);
        let accel = all
            .iter()
            .find(|v| v.kind == ViolationKind::AccelBound)
            .unwrap();
        assert!((accel.margin - 9.0).abs() < 1e-12);
    }

    #[test]
    fn rear_end_examples() {
        let leader = PolyTrajectory::new(vec![0.0, 10.0], 0.0, 10.0);
        let follower = PolyTrajectory::new(vec![-30.0, 10.0], 3.0, 13.0);
        assert_eq!(check_rear_end(&follower, &leader, 2.0, 0.5).unwrap(), None);
        let v = check_rear_end(&follower, &leader, 4.0, 0.5)
            .unwrap()
            .unwrap();
        assert_eq!(v.kind, ViolationKind::RearEnd);
        assert!((v.margin - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rear_end_matched_cubic_against_dense_oracle() {
        let tau_r = 2.0;
        let leader = PolyTrajectory::new(vec![0.0, 10.0], 0.0, 10.0);
        // follower: same profile delayed by exactly tau_r, built through the BVP
        let entry = crate::trajectory::EntryState {
            t0: tau_r,
            p0: 0.0,
            v0: 10.0,
        };
        let follower = crate::trajectory::solve_cubic_bvp(&entry, 100.0, 10.0 + tau_r).unwrap();
        assert_eq!(
            check_rear_end(&follower, &leader, tau_r, 0.5).unwrap(),
            None
        );
        // dense oracle at 0.01 m by bisection on each trajectory independently
        let time_at = |traj: &PolyTrajectory, p: f64| {
            let (mut a, mut b) = (traj.t_start, traj.t_end);
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                if traj.position_at(m) < p {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        };
        for i in 0..=10_000 {
            let p = i as f64 * 0.01;
            let gap = time_at(&follower, p) - time_at(&leader, p);
            assert!(gap >= tau_r - 1e-9, "gap {gap} at {p}");
        }
    }

    #[test]
    fn idle_window_examples() {
        let mut ledger = OccupancyLedger::new();
        let dummy = |t: f64| PolyTrajectory::new(vec![0.0, 10.0], t, t + 10.0);
        ledger.commit(1, 1, dummy(0.0), &[(0, 10.0)]);
        ledger.commit(2, 1, dummy(4.0), &[(0, 20.0)]);
        let w = idle_windows(&ledger, 0, TimeWindow::new(0.0, 30.0).unwrap(), 2.0);
        assert_eq!(
            w,
            vec![
                TimeWindow::new(0.0, 8.0).unwrap(),
                TimeWindow::new(12.0, 18.0).unwrap(),
                TimeWindow::new(22.0, 30.0).unwrap()
            ]
        );

        let empty = OccupancyLedger::new();
        let h = TimeWindow::new(5.0, 50.0).unwrap();
        assert_eq!(idle_windows(&empty, 3, h, 2.0), vec![h]);

        let w = complement_of_blocks(
            &[10.0, 13.0, 16.0],
            TimeWindow::new(0.0, 20.0).unwrap(),
            2.0,
        );
        assert_eq!(
            w,
            vec![
                TimeWindow::new(0.0, 8.0).unwrap(),
                TimeWindow::new(18.0, 20.0).unwrap()
            ]
        );
    }

    #[test]
    fn idle_windows_against_sampled_indicator() {
        // brute force: blocked indicator sampled every 1e-3 s
        let times = [10.0, 13.0, 16.0];
        let horizon = TimeWindow::new(0.0, 20.0).unwrap();
        let windows = complement_of_blocks(&times, horizon, 2.0);
        for k in 0..=20_000 {
            let t = k as f64 * 1e-3;
            let blocked = times.iter().any(|c| (t - c).abs() < 2.0);
            let idle = windows.iter().any(|w| w.contains(t));
            assert!(blocked != idle || (times.iter().any(|c| ((t - c).abs() - 2.0).abs() < 1e-9)));
        }
    }

    #[test]
    fn gap_guarantee_examples() {
        let p = |tau_r, tau_l| SafetyParams { tau_r, tau_l };
        assert!(gap_guarantee_holds(&p(4.0, 2.0)));
        assert!(!gap_guarantee_holds(&p(3.0, 2.0)));
        assert!(gap_guarantee_holds(&p(5.0, 2.0)));
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
    fn audit_examples() {
        let layout = crossing_layout();
        let params = SafetyParams {
            tau_r: 4.0,
            tau_l: 2.0,
        };
        assert!(audit(&OccupancyLedger::new(), &layout, &params, &limits()).is_empty());

        let mut ledger = OccupancyLedger::new();
        // both reach 50 m five seconds after entry; entries 1 s apart
        ledger.commit(1, 1, line(10.0, 0.0, 100.0), &[(0, 5.0)]);
        ledger.commit(2, 2, line(10.0, 1.0, 100.0), &[(0, 6.0)]);
        let found = audit(&ledger, &layout, &params, &limits());
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, ViolationKind::Lateral);
        assert_eq!(found[0].vehicle_ids, vec![1, 2]);
        assert!((found[0].margin - 1.0).abs() < 1e-9);
    }

    #[test]
    fn audit_flags_rear_end_and_bounds() {
        let layout = crossing_layout();
        let params = SafetyParams {
            tau_r: 4.0,
            tau_l: 2.0,
        };
        let mut ledger = OccupancyLedger::new();
        ledger.commit(1, 1, line(10.0, 0.0, 100.0), &[(0, 5.0)]);
        ledger.commit(2, 1, line(10.0, 3.0, 100.0), &[(0, 8.0)]);
        ledger.commit(3, 2, line(20.0, 30.0, 100.0), &[(0, 32.5)]);
        let found = audit(&ledger, &layout, &params, &limits());
        let kinds: Vec<_> = found.iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::RearEnd));
        assert!(kinds.contains(&ViolationKind::SpeedBound));
        assert!(found.iter().all(|v| v.margin > 0.0));
    }

    #[test]
    fn ledger_ordering() {
        let mut ledger = OccupancyLedger::new();
        ledger.commit(2, 1, line(10.0, 5.0, 100.0), &[(0, 10.0)]);
        ledger.commit(1, 1, line(10.0, 0.0, 100.0), &[(0, 5.0)]);
        assert_eq!(ledger.on_path(1)[0].vehicle_id, 1);
        assert_eq!(ledger.crossings_at(0)[0].vehicle_id, 1);
        assert_eq!(ledger.leader(1, 4.0).unwrap().vehicle_id, 1);
        assert_eq!(ledger.follower(1, 4.0).unwrap().vehicle_id, 2);
        assert!(ledger.leader(1, -1.0).is_none());
        assert_eq!(ledger.vehicle_count(), 2);
    }

    proptest! {
        #[test]
        fn windows_complement_blocks(
            times in proptest::collection::vec(0.0f64..100.0, 0..12),
            tau_l in 0.1f64..4.0,
            start in -5.0f64..50.0,
            width in 1.0f64..80.0,
        ) {
            let horizon = TimeWindow::new(start, start + width).unwrap();
            let windows = complement_of_blocks(&times, horizon, tau_l);
            // disjoint, sorted, inside the horizon, clear of every block
            for w in &windows {
                prop_assert!(w.start >= horizon.start && w.end <= horizon.end);
                for &t in &times {
                    prop_assert!(w.end <= t - tau_l + 1e-12 || w.start >= t + tau_l - 1e-12);
                }
            }
            for pair in windows.windows(2) {
                prop_assert!(pair[0].end < pair[1].start);
            }
            // measure: idle + blocked (clipped, merged) == horizon
            let mut blocks: Vec<(f64, f64)> = times.iter()
                .map(|&t| ((t - tau_l).max(horizon.start), (t + tau_l).min(horizon.end)))
                .filter(|(a, b)| a < b)
                .collect();
            blocks.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut blocked = 0.0;
            let mut cur: Option<(f64, f64)> = None;
            for (a, b) in blocks {
                match cur {
                    Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
                    Some((ca, cb)) => { blocked += cb - ca; cur = Some((a, b)); }
                    None => cur = Some((a, b)),
                }
            }
            if let Some((a, b)) = cur { blocked += b - a; }
            let idle: f64 = windows.iter().map(TimeWindow::len).sum();
            prop_assert!((idle + blocked - horizon.len()).abs() < 1e-9);
        }
    }
}
