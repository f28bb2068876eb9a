//! Small hand-built scenarios used by the examples and tests.

use crate::constraints::{OccupancyLedger, SafetyParams, VehicleId};
use crate::geometry::{ConflictId, ConflictPosition, IntersectionLayout, PathDescriptor, PathId};
use crate::planner::PlanRequest;
use crate::trajectory::{EntryState, KinematicLimits, PolyTrajectory};

/// Layout, pre-committed cross traffic and the vehicles still to plan.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub layout: IntersectionLayout,
    pub ledger: OccupancyLedger,
    pub requests: Vec<PlanRequest>,
    pub limits: KinematicLimits,
    pub params: SafetyParams,
}

const STREAM_SPEED: f64 = 10.0;
const STREAM_CONFLICT_AT: f64 = 50.0;

/// Constant-speed vehicle crossing `STREAM_CONFLICT_AT` on its path at `t`.
pub fn stream_vehicle(t: f64, length: f64) -> PolyTrajectory {
    let t_in = t - STREAM_CONFLICT_AT / STREAM_SPEED;
    PolyTrajectory::with_origin(
        vec![0.0, STREAM_SPEED],
        t_in,
        t_in,
        t_in + length / STREAM_SPEED,
    )
}

/// Crossing times spaced `2 tau_l` on `[from, to]` except for one gap.
fn stream_times(from: f64, to: f64, gap: (f64, f64), spacing: f64) -> Vec<f64> {
    let mut times = Vec::new();
    let mut t = gap.0;
    while t >= from {
        times.push(t);
        t -= spacing;
    }
    times.reverse();
    let mut t = gap.1;
    while t <= to {
        times.push(t);
        t += spacing;
    }
    times
}

/// Two vehicles whose conflict points are each open only in a short
/// window, arranged so that reaching them in time needs a slow approach
/// followed by a faster run. No cubic with zero terminal input does that.
pub fn congestion() -> Scenario {
    let limits = KinematicLimits::new(1.0, 15.0, -3.0, 3.0).expect("valid limits");
    let params = SafetyParams {
        tau_r: 2.0,
        tau_l: 1.0,
    };
    let spacing = 2.0 * params.tau_l;
    // idle windows (before the offset) at 40, 50 and 60 m
    let windows = [(5.5, 6.5), (6.3, 7.5), (7.0, 8.0)];
    let offsets = [0.0, 0.5];

    let mut paths = Vec::new();
    let mut ledger = OccupancyLedger::new();
    let mut requests = Vec::new();
    let mut next_stream_path: PathId = 100;
    let mut next_stream_vehicle: VehicleId = 1000;
    for (k, &offset) in offsets.iter().enumerate() {
        let target: PathId = k as PathId + 1;
        let conflicts: Vec<ConflictPosition> = windows
            .iter()
            .enumerate()
            .map(|(i, _)| ConflictPosition {
                conflict_id: (3 * k + i) as ConflictId + 1,
                position: 40.0 + 10.0 * i as f64,
            })
            .collect();
        for (c, &(open, close)) in conflicts.iter().zip(&windows) {
            let stream_path = next_stream_path;
            next_stream_path += 1;
            paths.push(PathDescriptor {
                path_id: stream_path,
                length: 100.0,
                conflicts: vec![ConflictPosition {
                    conflict_id: c.conflict_id,
                    position: STREAM_CONFLICT_AT,
                }],
            });
            let gap = (open + offset - params.tau_l, close + offset + params.tau_l);
            for t in stream_times(-60.0, 150.0, gap, spacing) {
                ledger.commit(
                    next_stream_vehicle,
                    stream_path,
                    stream_vehicle(t, 100.0),
                    &[(c.conflict_id, t)],
                );
                next_stream_vehicle += 1;
            }
        }
        paths.push(PathDescriptor {
            path_id: target,
            length: 100.0,
            conflicts,
        });
        requests.push(PlanRequest {
            vehicle_id: k as VehicleId + 1,
            path_id: target,
            entry: EntryState {
                t0: offset,
                p0: 0.0,
                v0: 10.0,
            },
            limits,
            params,
        });
    }
    Scenario {
        layout: IntersectionLayout::new(paths).expect("valid layout"),
        ledger,
        requests,
        limits,
        params,
    }
}
