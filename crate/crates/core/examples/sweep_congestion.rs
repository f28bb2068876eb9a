//! Sweeps the arrival rate over a few seeds and prints how often the
//! planner has to fall back.
//!
//! Usage: `cargo run --release --example sweep_congestion -- [duration]`

use cavcoord::geometry::IntersectionLayout;
use cavcoord::simulation::{sweep, SimConfig};

fn main() {
    let duration = std::env::args()
        .nth(1)
        .map_or(120.0, |s| s.parse().expect("number"));
    let mut base = SimConfig::with_layout(IntersectionLayout::four_leg_12path());
    base.duration = duration;
    let rows = sweep(&base, &[0.01, 0.03, 0.06, 0.1], &[1, 2, 3]).expect("valid config");
    println!("rate   seed  vehicles  fallback  rejected  mean_tt  violations");
    for r in &rows {
        let m = &r.metrics;
        println!(
            "{:<6} {:<5} {:<9} {:<9} {:<9} {:<8.2} {}",
            r.rate,
            r.seed,
            m.vehicles_total,
            m.vehicles_fallback,
            m.vehicles_rejected,
            m.mean_travel_time,
            m.audit_violations
        );
    }
}
