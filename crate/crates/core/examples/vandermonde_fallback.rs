//! Interpolates a trajectory through chosen node times, then lets the
//! optimizer move the nodes inside their windows to cut jerk.

use cavcoord::planner::{
    interpolate_through, optimize_node_times, FallbackProblem, NodeTimes, OptimizerOptions,
};
use cavcoord::trajectory::{
    extrema_bounds, squared_jerk_integral, vandermonde_determinant, EntryState, KinematicLimits,
};

fn main() {
    let limits = KinematicLimits::new(1.0, 15.0, -3.0, 3.0).expect("valid limits");
    let entry = EntryState::new(0.0, 0.0, 10.0, &limits).expect("speed within limits");
    let positions = vec![40.0, 50.0, 60.0, 100.0];

    let seed = NodeTimes {
        crossings: vec![4.4, 5.6, 7.0],
        exit: 13.8,
    };
    let times = seed.to_vec();
    let traj = interpolate_through(&entry, &positions, &times).expect("ordered nodes");
    let mut all = vec![entry.t0];
    all.extend(&times);
    println!(
        "determinant of the node matrix {:.4e}",
        vandermonde_determinant(&all)
    );
    for (t, p) in times.iter().zip(&positions) {
        println!("  p({t:.2}) = {:.9} (target {p})", traj.position_at(*t));
    }
    println!(
        "seed jerk {:.5}, bounds {:?}",
        squared_jerk_integral(&traj),
        extrema_bounds(&traj)
    );

    let problem = FallbackProblem {
        entry,
        limits,
        positions,
        lower: vec![3.9, 5.1, 6.5, 12.8],
        upper: vec![4.9, 6.1, 7.5, 14.8],
    };
    let best = optimize_node_times(&problem, &seed, &OptimizerOptions::default())
        .expect("seed is feasible");
    println!(
        "optimized nodes {:?} exit {:.3}, jerk {:.3e} after {} evaluations",
        best.nodes.crossings, best.nodes.exit, best.objective, best.evaluations
    );
    println!("bounds {:?}", extrema_bounds(&best.trajectory));
}
