//! Trajectory planning for connected automated vehicles crossing a
//! signal-free intersection.
//!
//! Each arriving vehicle plans once, against the trajectories already
//! committed by earlier vehicles. The planner first looks for the
//! energy-optimal cubic with the earliest admissible exit time. When
//! traffic leaves no such cubic, it interpolates a higher-order polynomial
//! through idle windows at each conflict point and picks the node times
//! with least squared jerk.
//!
//! * [`geometry`]: paths, conflict points, the built-in four-leg layout.
//! * [`trajectory`]: polynomial trajectories, the cubic boundary-value
//!   problem, Vandermonde interpolation, extrema and integrals.
//! * [`constraints`]: the occupancy ledger, headway checks, idle windows
//!   and the independent audit.
//! * [`planner`]: exit-time scan and the interpolation fallback.
//! * [`simulation`]: Poisson arrivals, sequential planning, metrics.
//! * [`io`] and [`cli`]: config files, CSV export, the command line.

pub mod constraints;
pub mod geometry;
pub mod planner;
pub mod scenarios;
pub mod simulation;
pub mod trajectory;

pub mod cli;
pub mod io;
