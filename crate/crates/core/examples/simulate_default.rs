//! Simulates the built-in four-leg intersection and prints the metrics.
//!
//! Usage: `cargo run --release --example simulate_default -- [rate] [seed] [duration]`

use cavcoord::geometry::IntersectionLayout;
use cavcoord::simulation::{run, SimConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).map_or(default, |s| s.parse().expect("number"));
    let mut config = SimConfig::with_layout(IntersectionLayout::four_leg_12path());
    config.arrival_rate_per_path = arg(0, 0.02);
    config.rng_seed = arg(1, 1.0) as u64;
    config.duration = arg(2, 300.0);

    let started = std::time::Instant::now();
    let outcome = run(&config).expect("valid config");
    let m = &outcome.metrics;
    println!(
        "rate {}/s per path, seed {}, {} s of arrivals",
        config.arrival_rate_per_path, config.rng_seed, config.duration
    );
    println!(
        "vehicles {}: cubic {}, fallback {}, rejected {}",
        m.vehicles_total, m.vehicles_cubic, m.vehicles_fallback, m.vehicles_rejected
    );
    println!(
        "travel time mean {:.2} s, max {:.2} s; mean energy {:.3}; mean jerk {:.3}",
        m.mean_travel_time, m.max_travel_time, m.mean_energy, m.mean_jerk
    );
    println!(
        "planner latency p50 {:.2} ms, p95 {:.2} ms; audit violations {}",
        1e3 * m.latency.p50,
        1e3 * m.latency.p95,
        m.audit_violations
    );
    println!("wall time {:.2} s", started.elapsed().as_secs_f64());
}
