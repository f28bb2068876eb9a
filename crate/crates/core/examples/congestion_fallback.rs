//! Two vehicles boxed in by cross traffic fall back to the interpolating
//! polynomial; the ledger is audited afterwards.

use cavcoord::constraints::audit;
use cavcoord::planner::{plan, plan_cubic_scan, PlannerOptions};
use cavcoord::scenarios::congestion;

fn main() {
    let mut s = congestion();
    let options = PlannerOptions::default();
    for req in &s.requests {
        let scan =
            plan_cubic_scan(req, &s.ledger, &s.layout, options.scan_step).expect("valid request");
        let r = plan(req, &mut s.ledger, &s.layout, &options).expect("valid request");
        println!(
            "vehicle {}: cubic scan {:?} after {} steps, plan {:?}, exit {:?}",
            req.vehicle_id, scan.status, scan.diagnostics.scan_steps, r.status, r.exit_time
        );
        for (c, t) in &r.crossing_times {
            println!("  conflict {c} at {t:.3} s");
        }
        println!("  diagnostics {:?}", r.diagnostics);
    }
    let violations = audit(&s.ledger, &s.layout, &s.params, &s.limits);
    println!("audit: {} violations", violations.len());
}
