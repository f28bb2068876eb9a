//! Plans vehicles one after another on the built-in four-leg layout and
//! shows how each new plan respects the ones already committed.

use cavcoord::constraints::{audit, OccupancyLedger, SafetyParams};
use cavcoord::geometry::IntersectionLayout;
use cavcoord::planner::{plan, PlanRequest, PlannerOptions};
use cavcoord::trajectory::{EntryState, KinematicLimits};

fn main() {
    let layout = IntersectionLayout::four_leg_12path();
    let limits = KinematicLimits::new(1.0, 15.0, -3.0, 3.0).expect("valid limits");
    let params = SafetyParams {
        tau_r: 2.0,
        tau_l: 1.0,
    };
    let options = PlannerOptions::default();
    let mut ledger = OccupancyLedger::new();

    // (path, entry time, entry speed)
    let arrivals = [
        (1, 0.0, 10.0),
        (4, 0.2, 11.0),
        (7, 0.4, 9.0),
        (1, 2.5, 12.0),
        (10, 0.5, 10.0),
    ];
    for (vehicle_id, &(path_id, t0, v0)) in arrivals.iter().enumerate() {
        let req = PlanRequest {
            vehicle_id: vehicle_id as u64 + 1,
            path_id,
            entry: EntryState::new(t0, 0.0, v0, &limits).expect("speed within limits"),
            limits,
            params,
        };
        let r = plan(&req, &mut ledger, &layout, &options).expect("valid request");
        let crossings: Vec<String> = r
            .crossing_times
            .iter()
            .map(|(c, t)| format!("{c}@{t:.2}"))
            .collect();
        println!(
            "vehicle {} path {path_id}: {:?}, exit {:?}, crossings [{}], {:.2} ms",
            req.vehicle_id,
            r.status,
            r.exit_time.map(|t| (t * 1e3).round() / 1e3),
            crossings.join(" "),
            r.solve_seconds * 1e3
        );
    }
    println!(
        "audit: {} violations",
        audit(&ledger, &layout, &params, &limits).len()
    );
}
