//! Solves the energy-optimal cubic for one vehicle and checks its boundary
//! conditions and state bounds.

use cavcoord::constraints::check_state_bounds;
use cavcoord::trajectory::{
    extrema_bounds, feasible_exit_range, solve_cubic_bvp, squared_accel_integral, EntryState,
    KinematicLimits,
};

fn main() {
    let limits = KinematicLimits::new(1.0, 15.0, -3.0, 3.0).expect("valid limits");
    let entry = EntryState::new(0.0, 0.0, 10.0, &limits).expect("speed within limits");
    let length = 100.0;

    let (t_lo, t_hi) = feasible_exit_range(&entry, &limits, length);
    println!("reachable exit times [{t_lo:.3}, {t_hi:.3}] s");

    for t_f in [9.0, 10.0, 12.0, 14.0] {
        let traj = solve_cubic_bvp(&entry, length, t_f).expect("positive horizon");
        let end = traj.kinematics_at(t_f);
        let b = extrema_bounds(&traj);
        let ok = check_state_bounds(&traj, &limits).is_none();
        println!(
            "t_f {t_f:>5.2}: p(t_f) {:.6}, u(t_f) {:+.1e}, v in [{:.2}, {:.2}], u in [{:+.2}, {:+.2}], energy {:.4}, feasible {ok}",
            end.p,
            end.a,
            b.v_lo,
            b.v_hi,
            b.a_lo,
            b.a_hi,
            squared_accel_integral(&traj)
        );
    }
}
