//! Lists the gaps a cross-path vehicle can use at a conflict point shared
//! by a platoon spaced one rear-end headway apart.

use cavcoord::constraints::{
    gap_guarantee_holds, idle_windows, OccupancyLedger, SafetyParams, TimeWindow,
};
use cavcoord::scenarios::stream_vehicle;

fn main() {
    let params = SafetyParams {
        tau_r: 2.0,
        tau_l: 0.75,
    };
    println!("tau_r >= 2 tau_l: {}", gap_guarantee_holds(&params));

    // conflict 1 sits 50 m down path 1; vehicles cross it at 5 m/s + t0
    let mut ledger = OccupancyLedger::new();
    for k in 0..4 {
        let t0 = k as f64 * params.tau_r;
        ledger.commit(k, 1, stream_vehicle(t0, 100.0), &[(1, t0 + 5.0)]);
    }
    for c in ledger.crossings_at(1) {
        println!("vehicle {} crosses at {:.2} s", c.vehicle_id, c.time);
    }

    let horizon = TimeWindow::new(0.0, 20.0).expect("ordered");
    for w in idle_windows(&ledger, 1, horizon, params.tau_l) {
        println!("idle [{:.2}, {:.2}] length {:.2}", w.start, w.end, w.len());
    }
}
