//! Arrival generation and the sequential planning loop.
//!
//! Trajectories are committed in full when a vehicle enters, so a run is
//! just the ordered sequence of arrivals handed to the planner one by one.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    audit_with_step, gap_guarantee_holds, OccupancyLedger, SafetyParams, VehicleId, Violation,
};
use crate::geometry::{IntersectionLayout, PathId};
use crate::planner::{plan, PlanRequest, PlanResult, PlanStatus, PlannerOptions};
use crate::trajectory::{
    squared_accel_integral, squared_jerk_integral, EntryState, KinematicLimits,
};

/// Invalid configuration, located by a JSON pointer into the config file.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{pointer}: {message}")]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub layout: IntersectionLayout,
    pub limits: KinematicLimits,
    pub params: SafetyParams,
    /// Accept `tau_r < 2 tau_l`, giving up the guaranteed lateral gap.
    pub allow_weak_headways: bool,
    /// Arrival rate (vehicles/s) on every path without an override.
    pub arrival_rate_per_path: f64,
    pub path_rates: BTreeMap<PathId, f64>,
    /// Entry speeds are uniform on `[lo, hi]`.
    pub entry_speed: (f64, f64),
    pub duration: f64,
    pub rng_seed: u64,
    pub planner: PlannerOptions,
    pub sample_dt: f64,
}

impl SimConfig {
    /// Defaults around a given layout.
    pub fn with_layout(layout: IntersectionLayout) -> Self {
        Self {
            layout,
            limits: KinematicLimits {
                v_min: 1.0,
                v_max: 15.0,
                u_min: -3.0,
                u_max: 3.0,
            },
            params: SafetyParams {
                tau_r: 2.0,
                tau_l: 1.0,
            },
            allow_weak_headways: false,
            arrival_rate_per_path: 0.02,
            path_rates: BTreeMap::new(),
            entry_speed: (8.0, 12.0),
            duration: 300.0,
            rng_seed: 0,
            planner: PlannerOptions::default(),
            sample_dt: 0.1,
        }
    }

    pub fn rate_for(&self, path_id: PathId) -> f64 {
        self.path_rates
            .get(&path_id)
            .copied()
            .unwrap_or(self.arrival_rate_per_path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.limits
            .validate()
            .map_err(|e| ConfigError::new("/limits", e.to_string()))?;
        let p = &self.params;
        if !(p.tau_l > 0.0 && p.tau_l.is_finite()) {
            return Err(ConfigError::new("/safety/tau_l", "must be positive"));
        }
        if !(p.tau_r > 0.0 && p.tau_r.is_finite()) {
            return Err(ConfigError::new("/safety/tau_r", "must be positive"));
        }
        if !gap_guarantee_holds(p) && !self.allow_weak_headways {
            return Err(ConfigError::new(
                "/safety/tau_r",
                format!(
                    "tau_r = {} < 2 tau_l = {}: consecutive same-path vehicles would not leave a lateral gap \
                     for crossing traffic (set allow_weak_headways to override)",
                    p.tau_r,
                    2.0 * p.tau_l
                ),
            ));
        }
        if !(self.arrival_rate_per_path >= 0.0 && self.arrival_rate_per_path.is_finite()) {
            return Err(ConfigError::new(
                "/arrivals/rate_per_path",
                "must be finite and non-negative",
            ));
        }
        for (path_id, rate) in &self.path_rates {
            if self.layout.path(*path_id).is_err() {
                return Err(ConfigError::new(
                    format!("/arrivals/path_rates/{path_id}"),
                    "unknown path",
                ));
            }
            if !(*rate >= 0.0 && rate.is_finite()) {
                return Err(ConfigError::new(
                    format!("/arrivals/path_rates/{path_id}"),
                    "must be finite and non-negative",
                ));
            }
        }
        let (lo, hi) = self.entry_speed;
        if !(lo <= hi && lo >= self.limits.v_min && hi <= self.limits.v_max) {
            return Err(ConfigError::new(
                "/arrivals/entry_speed",
                format!(
                    "[{lo}, {hi}] must be an interval inside [{}, {}]",
                    self.limits.v_min, self.limits.v_max
                ),
            ));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(ConfigError::new("/arrivals/duration", "must be positive"));
        }
        let o = &self.planner;
        for (pointer, value) in [
            ("/solver/scan_step", o.scan_step),
            ("/solver/rear_end_step", o.rear_end_step),
            ("/solver/optimizer_tolerance", o.optimizer.tolerance),
            ("/solver/penalty_weight", o.optimizer.penalty_weight),
            ("/output/sample_dt", self.sample_dt),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::new(pointer, "must be positive"));
            }
        }
        if !(o.optimizer.ordering_margin >= 0.0) {
            return Err(ConfigError::new(
                "/solver/ordering_margin",
                "must be non-negative",
            ));
        }
        if o.optimizer.max_iterations == 0 {
            return Err(ConfigError::new(
                "/solver/optimizer_max_iterations",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub t: f64,
    pub path_id: PathId,
    pub v0: f64,
}

/// Per-path Poisson arrivals with uniform entry speeds.
///
/// Each path draws from its own ChaCha stream, so adding a path or changing
/// another path's rate leaves its arrivals unchanged. Arrivals closer than
/// `tau_r` behind the previous one on the same path are pushed back; those
/// pushed past the duration are dropped.
pub fn generate_arrivals(config: &SimConfig) -> Vec<Arrival> {
    let mut out = Vec::new();
    let (v_lo, v_hi) = config.entry_speed;
    for path in config.layout.paths() {
        let rate = config.rate_for(path.path_id);
        if rate <= 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(u64::from(path.path_id));
        let gaps = Exp::new(rate).expect("positive rate");
        let mut raw = 0.0;
        let mut last: Option<f64> = None;
        loop {
            raw += gaps.sample(&mut rng);
            let v0 = if v_hi > v_lo {
                rng.gen_range(v_lo..=v_hi)
            } else {
                v_lo
            };
            if raw > config.duration {
                break;
            }
            let t = last.map_or(raw, |l| raw.max(l + config.params.tau_r));
            if t > config.duration {
                break;
            }
            last = Some(t);
            out.push(Arrival {
                t,
                path_id: path.path_id,
                v0,
            });
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.path_id.cmp(&b.path_id)));
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub vehicles_total: usize,
    pub vehicles_cubic: usize,
    pub vehicles_fallback: usize,
    pub vehicles_rejected: usize,
    pub mean_travel_time: f64,
    pub max_travel_time: f64,
    /// Mean of the integral of squared acceleration (m^2/s^3).
    pub mean_energy: f64,
    /// Mean of the integral of squared jerk (m^2/s^5).
    pub mean_jerk: f64,
    /// Largest `|v(t0) - v0|` among committed trajectories.
    pub max_entry_speed_jump: f64,
    pub audit_violations: usize,
    /// Wall-clock planner latency; kept out of the deterministic output.
    #[serde(skip)]
    pub latency: Latency,
}

impl Metrics {
    /// Copy with the wall-clock fields cleared, for comparisons.
    pub fn without_latency(&self) -> Self {
        Self {
            latency: Latency::default(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl Latency {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let at = |q: f64| s[((q * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        Self {
            p50: at(0.5),
            p95: at(0.95),
            max: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub vehicle_id: VehicleId,
    pub path_id: PathId,
    pub t0: f64,
    pub v0: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub ledger: OccupancyLedger,
    pub results: Vec<PlanResult>,
    pub rejected: Vec<Rejection>,
    pub violations: Vec<Violation>,
    pub metrics: Metrics,
}

/// Plans every arrival in order, then audits the resulting ledger.
pub fn run(config: &SimConfig) -> Result<SimOutcome, ConfigError> {
    config.validate()?;
    let mut ledger = OccupancyLedger::new();
    let mut results = Vec::new();
    let mut rejected = Vec::new();
    for (i, arrival) in generate_arrivals(config).into_iter().enumerate() {
        let req = PlanRequest {
            vehicle_id: i as VehicleId + 1,
            path_id: arrival.path_id,
            entry: EntryState {
                t0: arrival.t,
                p0: 0.0,
                v0: arrival.v0,
            },
            limits: config.limits,
            params: config.params,
        };
        let result = plan(&req, &mut ledger, &config.layout, &config.planner)
            .map_err(|e| ConfigError::new("", format!("vehicle {}: {e}", req.vehicle_id)))?;
        if result.status == PlanStatus::Infeasible {
            rejected.push(Rejection {
                vehicle_id: req.vehicle_id,
                path_id: req.path_id,
                t0: arrival.t,
                v0: arrival.v0,
                reason: result.diagnostics.rejection.clone().unwrap_or_default(),
            });
        }
        results.push(result);
    }
    let violations = audit_with_step(
        &ledger,
        &config.layout,
        &config.params,
        &config.limits,
        config.planner.rear_end_step,
    );
    let metrics = summarize(&results, violations.len());
    Ok(SimOutcome {
        ledger,
        results,
        rejected,
        violations,
        metrics,
    })
}

fn summarize(results: &[PlanResult], audit_violations: usize) -> Metrics {
    let count = |s| results.iter().filter(|r| r.status == s).count();
    let mut m = Metrics {
        vehicles_total: results.len(),
        vehicles_cubic: count(PlanStatus::Cubic),
        vehicles_fallback: count(PlanStatus::QuarticFallback),
        vehicles_rejected: count(PlanStatus::Infeasible),
        audit_violations,
        latency: Latency::from_samples(
            &results.iter().map(|r| r.solve_seconds).collect::<Vec<_>>(),
        ),
        ..Metrics::default()
    };
    let committed: Vec<_> = results
        .iter()
        .filter_map(|r| {
            r.trajectory
                .as_ref()
                .map(|t| (t, r.diagnostics.entry_speed_jump.unwrap_or(0.0)))
        })
        .collect();
    if committed.is_empty() {
        return m;
    }
    let n = committed.len() as f64;
    for (traj, jump) in &committed {
        let travel = traj.duration();
        m.mean_travel_time += travel / n;
        m.max_travel_time = m.max_travel_time.max(travel);
        m.mean_energy += squared_accel_integral(traj) / n;
        m.mean_jerk += squared_jerk_integral(traj) / n;
        m.max_entry_speed_jump = m.max_entry_speed_jump.max(*jump);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

/// One run per `(rate, seed)` cell, rate-major. Cells run in parallel;
/// row order and contents do not depend on scheduling.
pub fn sweep(base: &SimConfig, rates: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>, ConfigError> {
    if rates.is_empty() {
        return Err(ConfigError::new("/rates", "at least one rate is required"));
    }
    if seeds.is_empty() {
        return Err(ConfigError::new("/seeds", "at least one seed is required"));
    }
    let cells: Vec<SimConfig> = rates
        .iter()
        .flat_map(|&rate| {
            seeds.iter().map(move |&seed| {
                let mut c = base.clone();
                c.arrival_rate_per_path = rate;
                c.path_rates.clear();
                c.rng_seed = seed;
                c
            })
        })
        .collect();
    for c in &cells {
        c.validate()?;
    }
    let slots: Vec<Mutex<Option<Result<SweepRow, ConfigError>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let row = run(cell).map(|o| SweepRow {
                    rate: cell.arrival_rate_per_path,
                    seed: cell.rng_seed,
                    metrics: o.metrics,
                });
                *slots[i].lock().expect("unpoisoned") = Some(row);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("unpoisoned").expect("every cell ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ViolationKind;
    use crate::geometry::{ConflictPosition, PathDescriptor};
    use crate::planner::plan_cubic_scan;
    use crate::trajectory::extrema_bounds;

    fn single_path(length: f64) -> IntersectionLayout {
        let path = |path_id| PathDescriptor {
            path_id,
            length,
            conflicts: vec![ConflictPosition {
                conflict_id: 1,
                position: length / 2.0,
            }],
        };
        IntersectionLayout::new(vec![path(1), path(2)]).unwrap()
    }

    fn config() -> SimConfig {
        SimConfig::with_layout(IntersectionLayout::four_leg_12path())
    }

    #[test]
    fn zero_rate_means_no_arrivals() {
        let mut c = config();
        c.arrival_rate_per_path = 0.0;
        assert!(generate_arrivals(&c).is_empty());
        let out = run(&c).unwrap();
        assert!(out.ledger.is_empty());
        assert_eq!(out.metrics, Metrics::default());
    }

    #[test]
    fn arrivals_are_reproducible_and_sorted() {
        let mut c = SimConfig::with_layout(single_path(100.0));
        c.arrival_rate_per_path = 0.1;
        c.path_rates.insert(2, 0.0);
        c.duration = 100.0;
        c.rng_seed = 42;
        let a = generate_arrivals(&c);
        assert_eq!(a, generate_arrivals(&c));
        assert!(!a.is_empty());
        assert!(a.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(a
            .iter()
            .all(|x| x.path_id == 1 && x.t <= 100.0 && (8.0..=12.0).contains(&x.v0)));
        c.rng_seed = 43;
        assert_ne!(a, generate_arrivals(&c));
    }

    #[test]
    fn dense_arrivals_respect_headway() {
        let mut c = SimConfig::with_layout(single_path(100.0));
        c.arrival_rate_per_path = 10.0;
        c.params = SafetyParams {
            tau_r: 4.0,
            tau_l: 1.0,
        };
        c.duration = 200.0;
        let a = generate_arrivals(&c);
        for path in [1, 2] {
            let times: Vec<f64> = a
                .iter()
                .filter(|x| x.path_id == path)
                .map(|x| x.t)
                .collect();
            assert!(times.len() > 40);
            assert!(times.windows(2).all(|w| w[1] - w[0] >= 4.0 - 1e-12));
        }
    }

    #[test]
    fn weak_headways_need_override() {
        let mut c = config();
        c.params = SafetyParams {
            tau_r: 3.0,
            tau_l: 2.0,
        };
        assert_eq!(c.validate().unwrap_err().pointer, "/safety/tau_r");
        c.allow_weak_headways = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn single_vehicle_matches_scan() {
        let mut c = SimConfig::with_layout(single_path(100.0));
        c.arrival_rate_per_path = 0.0;
        c.path_rates.insert(1, 0.05);
        c.duration = 500.0;
        c.rng_seed = 3;
        let arrivals = generate_arrivals(&c);
        let first = arrivals[0];
        c.duration = first.t;
        let out = run(&c).unwrap();
        assert_eq!(out.metrics.vehicles_total, 1);
        assert_eq!(out.metrics.vehicles_cubic, 1);
        let req = PlanRequest {
            vehicle_id: 1,
            path_id: 1,
            entry: EntryState {
                t0: first.t,
                p0: 0.0,
                v0: first.v0,
            },
            limits: c.limits,
            params: c.params,
        };
        let scan = plan_cubic_scan(&req, &OccupancyLedger::new(), &c.layout, 0.1).unwrap();
        assert_eq!(out.results[0].exit_time, scan.exit_time);
    }

    #[test]
    fn simultaneous_crossing_vehicles() {
        let layout = single_path(100.0);
        let mut ledger = OccupancyLedger::new();
        let mut crossings = Vec::new();
        for (id, path) in [(1, 1), (2, 2)] {
            let req = PlanRequest {
                vehicle_id: id,
                path_id: path,
                entry: EntryState {
                    t0: 0.0,
                    p0: 0.0,
                    v0: 10.0,
                },
                limits: config().limits,
                params: config().params,
            };
            let r = plan(&req, &mut ledger, &layout, &PlannerOptions::default()).unwrap();
            assert_ne!(r.status, PlanStatus::Infeasible);
            crossings.push(r.crossing_times[0].1);
        }
        assert!((crossings[0] - crossings[1]).abs() >= 1.0 - 1e-9);
        let v = audit_with_step(&ledger, &layout, &config().params, &config().limits, 0.5);
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn default_run_is_safe_and_reproducible() {
        let mut c = config();
        c.duration = 120.0;
        c.rng_seed = 9;
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap()
        );
        assert_eq!(a.metrics.audit_violations, 0, "{:?}", a.violations);
        let m = &a.metrics;
        assert_eq!(
            m.vehicles_total,
            m.vehicles_cubic + m.vehicles_fallback + m.vehicles_rejected
        );
        assert_eq!(m.vehicles_total, generate_arrivals(&c).len());
        for (_, t) in a.ledger.trajectories() {
            assert!(extrema_bounds(&t.trajectory).v_lo >= c.limits.v_min - 1e-9);
        }
        assert!(!a
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::NonMonotone));
    }

    #[test]
    fn sweep_rows_follow_input_order() {
        let mut c = config();
        c.duration = 60.0;
        let rows = sweep(&c, &[0.01, 0.03], &[1, 2]).unwrap();
        let keys: Vec<(f64, u64)> = rows.iter().map(|r| (r.rate, r.seed)).collect();
        assert_eq!(keys, vec![(0.01, 1), (0.01, 2), (0.03, 1), (0.03, 2)]);
        let mut single = c.clone();
        single.arrival_rate_per_path = 0.03;
        single.rng_seed = 2;
        assert_eq!(
            rows[3].metrics.without_latency(),
            run(&single).unwrap().metrics.without_latency()
        );
        assert_eq!(rows[0].metrics.vehicles_fallback, 0);
        assert!(sweep(&c, &[], &[1]).is_err());
        assert!(sweep(&c, &[0.1], &[]).is_err());
    }
}
