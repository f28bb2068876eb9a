//! Runs a short simulation, exports sampled trajectories as CSV and
//! audits them again from the CSV alone.

use cavcoord::geometry::IntersectionLayout;
use cavcoord::io::{audit_csv, export_trajectories, read_trajectories};
use cavcoord::simulation::{run, SimConfig};

fn main() {
    let mut config = SimConfig::with_layout(IntersectionLayout::four_leg_12path());
    config.arrival_rate_per_path = 0.05;
    config.duration = 60.0;
    let outcome = run(&config).expect("valid config");

    let csv = export_trajectories(&outcome.ledger, config.sample_dt);
    let rows = read_trajectories(&csv).expect("well-formed CSV");
    println!(
        "{} vehicles, {} samples",
        outcome.metrics.vehicles_total,
        rows.len()
    );
    for line in csv.lines().take(4) {
        println!("  {line}");
    }

    let violations = audit_csv(&csv, &config).expect("well-formed CSV");
    println!("audit from CSV: {} violations", violations.len());

    // double one vehicle's recorded speed
    let victim = rows[0].vehicle_id;
    let mut tampered = String::new();
    for (i, line) in csv.lines().enumerate() {
        let mut fields: Vec<String> = line.split(',').map(str::to_owned).collect();
        if i > 0 && fields[1] == victim.to_string() {
            let v: f64 = fields[4].parse().expect("speed");
            fields[4] = format!("{:.6}", 2.0 * v);
        }
        tampered.push_str(&fields.join(","));
        tampered.push('\n');
    }
    let violations = audit_csv(&tampered, &config).expect("well-formed CSV");
    println!(
        "after doubling vehicle {victim}'s speed: {} violations",
        violations.len()
    );
    for v in violations.iter().take(3) {
        println!("  {v:?}");
    }
}
