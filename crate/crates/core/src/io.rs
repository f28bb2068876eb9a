//! Config files, trajectory CSV, run bundles and the sampled-data auditor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::constraints::{OccupancyLedger, SafetyParams, VehicleId, Violation, ViolationKind};
use crate::geometry::{load_layout, IntersectionLayout, PathId};
use crate::planner::{OptimizerOptions, PlannerOptions};
use crate::simulation::{ConfigError, SimConfig, SimOutcome};
use crate::trajectory::KinematicLimits;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub const CSV_HEADER: [&str; 7] = [
    "t",
    "vehicle_id",
    "path_id",
    "position_m",
    "speed_mps",
    "accel_mps2",
    "jerk_mps3",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for LimitsSection {
    fn default() -> Self {
        let l = SimConfig::with_layout(IntersectionLayout::four_leg_12path()).limits;
        Self {
            v_min: l.v_min,
            v_max: l.v_max,
            u_min: l.u_min,
            u_max: l.u_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetySection {
    pub tau_r: f64,
    pub tau_l: f64,
    pub allow_weak_headways: bool,
}

impl Default for SafetySection {
    fn default() -> Self {
        Self {
            tau_r: 2.0,
            tau_l: 1.0,
            allow_weak_headways: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrivalsSection {
    pub rate_per_path: f64,
    pub path_rates: BTreeMap<PathId, f64>,
    pub entry_speed: [f64; 2],
    pub duration: f64,
    pub seed: u64,
}

impl Default for ArrivalsSection {
    fn default() -> Self {
        Self {
            rate_per_path: 0.02,
            path_rates: BTreeMap::new(),
            entry_speed: [8.0, 12.0],
            duration: 300.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub scan_step: f64,
    pub rear_end_step: f64,
    pub optimizer_max_iterations: usize,
    pub optimizer_tolerance: f64,
    pub penalty_weight: f64,
    pub ordering_margin: f64,
    pub grid_points: usize,
    pub extra_starts: usize,
    pub refine_starts: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let p = PlannerOptions::default();
        Self {
            scan_step: p.scan_step,
            rear_end_step: p.rear_end_step,
            optimizer_max_iterations: p.optimizer.max_iterations,
            optimizer_tolerance: p.optimizer.tolerance,
            penalty_weight: p.optimizer.penalty_weight,
            ordering_margin: p.optimizer.ordering_margin,
            grid_points: p.optimizer.grid_points,
            extra_starts: p.optimizer.extra_starts,
            refine_starts: p.optimizer.refine_starts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub sample_dt: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { sample_dt: 0.1 }
    }
}

/// On-disk configuration. Every section but `layout` may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub layout: Value,
    #[serde(default)]
    pub limits: LimitsSection,
    #[serde(default)]
    pub safety: SafetySection,
    #[serde(default)]
    pub arrivals: ArrivalsSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ConfigFile {
    pub fn resolve(&self) -> Result<SimConfig, ConfigError> {
        let layout =
            load_layout(&self.layout).map_err(|e| ConfigError::new("/layout", e.to_string()))?;
        let l = &self.limits;
        let s = &self.solver;
        let config = SimConfig {
            layout,
            limits: KinematicLimits {
                v_min: l.v_min,
                v_max: l.v_max,
                u_min: l.u_min,
                u_max: l.u_max,
            },
            params: SafetyParams {
                tau_r: self.safety.tau_r,
                tau_l: self.safety.tau_l,
            },
            allow_weak_headways: self.safety.allow_weak_headways,
            arrival_rate_per_path: self.arrivals.rate_per_path,
            path_rates: self.arrivals.path_rates.clone(),
            entry_speed: (self.arrivals.entry_speed[0], self.arrivals.entry_speed[1]),
            duration: self.arrivals.duration,
            rng_seed: self.arrivals.seed,
            planner: PlannerOptions {
                scan_step: s.scan_step,
                rear_end_step: s.rear_end_step,
                optimizer: OptimizerOptions {
                    max_iterations: s.optimizer_max_iterations,
                    tolerance: s.optimizer_tolerance,
                    penalty_weight: s.penalty_weight,
                    ordering_margin: s.ordering_margin,
                    grid_points: s.grid_points,
                    extra_starts: s.extra_starts,
                    refine_starts: s.refine_starts,
                },
            },
            sample_dt: self.output.sample_dt,
        };
        config.validate()?;
        Ok(config)
    }

    /// Fully materialized file for `config`, layout spelled out path by path.
    pub fn echo(config: &SimConfig) -> Self {
        let o = &config.planner.optimizer;
        Self {
            layout: config.layout.to_section(),
            limits: LimitsSection {
                v_min: config.limits.v_min,
                v_max: config.limits.v_max,
                u_min: config.limits.u_min,
                u_max: config.limits.u_max,
            },
            safety: SafetySection {
                tau_r: config.params.tau_r,
                tau_l: config.params.tau_l,
                allow_weak_headways: config.allow_weak_headways,
            },
            arrivals: ArrivalsSection {
                rate_per_path: config.arrival_rate_per_path,
                path_rates: config.path_rates.clone(),
                entry_speed: [config.entry_speed.0, config.entry_speed.1],
                duration: config.duration,
                seed: config.rng_seed,
            },
            solver: SolverSection {
                scan_step: config.planner.scan_step,
                rear_end_step: config.planner.rear_end_step,
                optimizer_max_iterations: o.max_iterations,
                optimizer_tolerance: o.tolerance,
                penalty_weight: o.penalty_weight,
                ordering_margin: o.ordering_margin,
                grid_points: o.grid_points,
                extra_starts: o.extra_starts,
                refine_starts: o.refine_starts,
            },
            output: OutputSection {
                sample_dt: config.sample_dt,
            },
        }
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    path.iter()
        .filter_map(|seg| match seg {
            serde_path_to_error::Segment::Seq { index } => Some(index.to_string()),
            serde_path_to_error::Segment::Map { key } => Some(key.clone()),
            serde_path_to_error::Segment::Enum { variant } => Some(variant.clone()),
            serde_path_to_error::Segment::Unknown => None,
        })
        .fold(String::new(), |acc, s| {
            acc + "/" + &s.replace('~', "~0").replace('/', "~1")
        })
}

/// Parses and validates a JSON config, materializing all defaults.
pub fn parse_config(text: &[u8]) -> Result<SimConfig, ConfigError> {
    let text =
        std::str::from_utf8(text).map_err(|e| ConfigError::new("", format!("not UTF-8: {e}")))?;
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_of(e.path());
        ConfigError::new(pointer, e.into_inner().to_string())
    })?;
    file.resolve()
}

pub fn config_echo(config: &SimConfig) -> String {
    serde_json::to_string_pretty(&ConfigFile::echo(config)).expect("config serializes") + "\n"
}

fn fixed(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

/// Instants from `t_start` to `t_end` inclusive at `dt`, the last step clamped.
pub fn sample_times(t_start: f64, t_end: f64, dt: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = t_start + k as f64 * dt;
        if t >= t_end - 1e-9 * dt {
            break;
        }
        out.push(t);
        k += 1;
    }
    out.push(t_end);
    out
}

/// Sampled kinematics of every committed vehicle, sorted by vehicle then time.
pub fn export_trajectories(ledger: &OccupancyLedger, sample_dt: f64) -> String {
    let mut vehicles: Vec<_> = ledger.trajectories().collect();
    vehicles.sort_by_key(|(_, c)| c.vehicle_id);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for (path_id, c) in vehicles {
        let traj = &c.trajectory;
        for t in sample_times(traj.t_start, traj.t_end, sample_dt) {
            let k = traj.kinematics_at(t);
            w.write_record([
                fixed(t),
                c.vehicle_id.to_string(),
                path_id.to_string(),
                fixed(k.p),
                fixed(k.v),
                fixed(k.a),
                fixed(k.j),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct CsvRow {
    pub t: f64,
    pub vehicle_id: VehicleId,
    pub path_id: PathId,
    pub position_m: f64,
    pub speed_mps: f64,
    pub accel_mps2: f64,
    pub jerk_mps3: f64,
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("trajectory CSV: {0}")]
    Parse(#[from] csv::Error),
    #[error("trajectory CSV: header must be {expected}")]
    Header { expected: String },
    #[error("trajectory CSV: vehicle {0} is not contiguous or not time-ordered")]
    Order(VehicleId),
    #[error("trajectory CSV: vehicle {vehicle_id} is on path {path_id}, which the layout lacks")]
    UnknownPath {
        vehicle_id: VehicleId,
        path_id: PathId,
    },
}

pub fn read_trajectories(text: &str) -> Result<Vec<CsvRow>, CsvError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(CsvError::Header {
            expected: CSV_HEADER.join(","),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(CsvError::from))
        .collect()
}

/// A vehicle reconstructed from its samples, linear between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledVehicle {
    pub vehicle_id: VehicleId,
    pub path_id: PathId,
    pub rows: Vec<CsvRow>,
}

impl SampledVehicle {
    fn entry_time(&self) -> f64 {
        self.rows[0].t
    }

    /// Time at which the vehicle reaches `p`, if its samples span it.
    pub fn time_at(&self, p: f64) -> Option<f64> {
        let i = self.rows.partition_point(|r| r.position_m < p);
        if i == self.rows.len() {
            return None;
        }
        if i == 0 {
            return (self.rows[0].position_m == p).then_some(self.rows[0].t);
        }
        let (a, b) = (&self.rows[i - 1], &self.rows[i]);
        let f = (p - a.position_m) / (b.position_m - a.position_m);
        Some(a.t + f * (b.t - a.t))
    }
}

pub fn group_vehicles(rows: Vec<CsvRow>) -> Result<Vec<SampledVehicle>, CsvError> {
    let mut out: Vec<SampledVehicle> = Vec::new();
    for row in rows {
        match out.last_mut() {
            Some(v) if v.vehicle_id == row.vehicle_id => {
                if row.path_id != v.path_id
                    || row.t <= v.rows.last().map_or(f64::NEG_INFINITY, |r| r.t)
                {
                    return Err(CsvError::Order(row.vehicle_id));
                }
                v.rows.push(row);
            }
            _ => {
                if out.iter().any(|v| v.vehicle_id == row.vehicle_id) {
                    return Err(CsvError::Order(row.vehicle_id));
                }
                out.push(SampledVehicle {
                    vehicle_id: row.vehicle_id,
                    path_id: row.path_id,
                    rows: vec![row],
                });
            }
        }
    }
    Ok(out)
}

/// Formatting quantum of the CSV columns.
const CSV_QUANTUM: f64 = 1e-6;

/// Checks an exported run from its samples alone.
///
/// Crossing times come from linear interpolation of position samples, so
/// headways are only resolved to about one sample interval; `slack`
/// (normally the export's `sample_dt`) is subtracted from both headways.
/// Speed and input bounds are checked at the samples.
pub fn audit_sampled(
    vehicles: &[SampledVehicle],
    layout: &IntersectionLayout,
    params: &SafetyParams,
    limits: &KinematicLimits,
    slack: f64,
) -> Result<Vec<Violation>, CsvError> {
    let mut out = Vec::new();
    for v in vehicles {
        if layout.path(v.path_id).is_err() {
            return Err(CsvError::UnknownPath {
                vehicle_id: v.vehicle_id,
                path_id: v.path_id,
            });
        }
        let tol = 2.0 * CSV_QUANTUM;
        let mut worst: Option<(ViolationKind, f64, f64)> = None;
        let mut note = |kind, margin: f64, at| {
            if margin > tol && worst.is_none_or(|(_, m, _)| margin > m) {
                worst = Some((kind, margin, at));
            }
        };
        for (i, r) in v.rows.iter().enumerate() {
            note(ViolationKind::SpeedBound, limits.v_min - r.speed_mps, r.t);
            note(ViolationKind::SpeedBound, r.speed_mps - limits.v_max, r.t);
            note(ViolationKind::AccelBound, limits.u_min - r.accel_mps2, r.t);
            note(ViolationKind::AccelBound, r.accel_mps2 - limits.u_max, r.t);
            if i > 0 {
                note(
                    ViolationKind::NonMonotone,
                    v.rows[i - 1].position_m - r.position_m,
                    r.t,
                );
            }
        }
        if let Some((kind, margin, at)) = worst {
            out.push(Violation {
                kind,
                vehicle_ids: vec![v.vehicle_id],
                at,
                margin,
            });
        }
    }

    // lateral: every pair from different paths at each shared conflict point
    for entries in layout.conflict_map().values() {
        let mut crossings: Vec<(f64, VehicleId, PathId)> = Vec::new();
        for v in vehicles {
            if let Some(e) = entries.iter().find(|e| e.path_id == v.path_id) {
                if let Some(t) = v.time_at(e.position) {
                    crossings.push((t, v.vehicle_id, v.path_id));
                }
            }
        }
        crossings.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (i, a) in crossings.iter().enumerate() {
            for b in &crossings[i + 1..] {
                let gap = b.0 - a.0;
                if gap >= params.tau_l - slack {
                    break;
                }
                if a.2 != b.2 {
                    out.push(Violation {
                        kind: ViolationKind::Lateral,
                        vehicle_ids: vec![a.1, b.1],
                        at: a.0,
                        margin: params.tau_l - gap,
                    });
                }
            }
        }
    }

    // rear-end: consecutive vehicles on each path, on a position grid
    let mut by_path: BTreeMap<PathId, Vec<&SampledVehicle>> = BTreeMap::new();
    for v in vehicles {
        by_path.entry(v.path_id).or_default().push(v);
    }
    for (path_id, mut list) in by_path {
        let length = layout.path(path_id).expect("checked above").length;
        list.sort_by(|a, b| a.entry_time().total_cmp(&b.entry_time()));
        for pair in list.windows(2) {
            let (leader, follower) = (pair[0], pair[1]);
            let mut worst: Option<(f64, f64)> = None;
            let steps = (length / 0.5).ceil() as usize;
            for k in 0..=steps {
                let p = (k as f64 * 0.5).min(length);
                let (Some(tl), Some(tf)) = (leader.time_at(p), follower.time_at(p)) else {
                    continue;
                };
                let margin = params.tau_r - (tf - tl);
                if margin > slack && worst.is_none_or(|(m, _)| margin > m) {
                    worst = Some((margin, p));
                }
            }
            if let Some((margin, at)) = worst {
                out.push(Violation {
                    kind: ViolationKind::RearEnd,
                    vehicle_ids: vec![leader.vehicle_id, follower.vehicle_id],
                    at,
                    margin,
                });
            }
        }
    }
    Ok(out)
}

/// Reads a trajectory CSV and audits it against `config`.
pub fn audit_csv(text: &str, config: &SimConfig) -> Result<Vec<Violation>, CsvError> {
    let vehicles = group_vehicles(read_trajectories(text)?)?;
    audit_sampled(
        &vehicles,
        &config.layout,
        &config.params,
        &config.limits,
        config.sample_dt,
    )
}

/// Index of the files written for one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBundle {
    pub config: String,
    pub trajectories: String,
    pub metrics: String,
    pub violations: String,
    pub rejected: String,
    pub ledger: String,
    pub tool_version: String,
    pub rng_seed: u64,
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Writes the run's deterministic outputs into `dir`, plus `timing.json`
/// with wall-clock latency, which is the only file that varies between
/// identical runs.
pub fn write_bundle(
    dir: &Path,
    config: &SimConfig,
    outcome: &SimOutcome,
) -> std::io::Result<RunBundle> {
    fs::create_dir_all(dir)?;
    let bundle = RunBundle {
        config: "config.json".into(),
        trajectories: "trajectories.csv".into(),
        metrics: "metrics.json".into(),
        violations: "violations.json".into(),
        rejected: "rejected.json".into(),
        ledger: "ledger.json".into(),
        tool_version: TOOL_VERSION.into(),
        rng_seed: config.rng_seed,
    };
    fs::write(dir.join(&bundle.config), config_echo(config))?;
    fs::write(
        dir.join(&bundle.trajectories),
        export_trajectories(&outcome.ledger, config.sample_dt),
    )?;
    fs::write(dir.join(&bundle.metrics), json_line(&outcome.metrics))?;
    fs::write(dir.join(&bundle.violations), json_line(&outcome.violations))?;
    fs::write(dir.join(&bundle.rejected), json_line(&outcome.rejected))?;
    fs::write(dir.join(&bundle.ledger), json_line(&outcome.ledger))?;
    fs::write(dir.join("timing.json"), json_line(&outcome.metrics.latency))?;
    fs::write(dir.join("bundle.json"), json_line(&bundle))?;
    Ok(bundle)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    json_line(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::PolyTrajectory;

    const MINIMAL: &str =
        r#"{"layout": {"builtin": "four-leg-12path"}, "safety": {"tau_r": 4, "tau_l": 2}}"#;

    #[test]
    fn minimal_config_materializes_defaults() {
        let c = parse_config(MINIMAL.as_bytes()).unwrap();
        assert_eq!(
            c.params,
            SafetyParams {
                tau_r: 4.0,
                tau_l: 2.0
            }
        );
        assert_eq!(c.planner, PlannerOptions::default());
        assert_eq!(c.layout.paths().len(), 12);
        let again = parse_config(config_echo(&c).as_bytes()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn config_errors_carry_pointers() {
        let weak =
            r#"{"layout": {"builtin": "four-leg-12path"}, "safety": {"tau_r": 3, "tau_l": 2}}"#;
        let e = parse_config(weak.as_bytes()).unwrap_err();
        assert_eq!(e.pointer, "/safety/tau_r");
        let stop = r#"{"layout": {"builtin": "four-leg-12path"}, "limits": {"v_min": 0}}"#;
        assert_eq!(
            parse_config(stop.as_bytes()).unwrap_err().pointer,
            "/limits"
        );
        let typo = r#"{"layout": {"builtin": "four-leg-12path"}, "solver": {"scan_stp": 0.2}}"#;
        assert_eq!(
            parse_config(typo.as_bytes()).unwrap_err().pointer,
            "/solver/scan_stp"
        );
        let bad_type = r#"{"layout": {"builtin": "four-leg-12path"}, "arrivals": {"seed": -1}}"#;
        assert_eq!(
            parse_config(bad_type.as_bytes()).unwrap_err().pointer,
            "/arrivals/seed"
        );
        let layout = r#"{"layout": {"builtin": "roundabout"}}"#;
        assert_eq!(
            parse_config(layout.as_bytes()).unwrap_err().pointer,
            "/layout"
        );
        assert!(parse_config(b"{").is_err());
    }

    fn constant_speed_ledger() -> OccupancyLedger {
        let mut ledger = OccupancyLedger::new();
        ledger.commit(1, 2, PolyTrajectory::new(vec![0.0, 10.0], 0.0, 10.0), &[]);
        ledger
    }

    #[test]
    fn export_constant_speed() {
        let csv = export_trajectories(&constant_speed_ledger(), 1.0);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines.len(), 12);
        for (k, line) in lines[1..].iter().enumerate() {
            let pos: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
            assert_eq!(pos, 10.0 * k as f64);
        }
        assert_eq!(
            lines[11],
            "10.000000,1,2,100.000000,10.000000,0.000000,0.000000"
        );
    }

    #[test]
    fn empty_ledger_exports_header_only() {
        assert_eq!(
            export_trajectories(&OccupancyLedger::new(), 0.1),
            CSV_HEADER.join(",") + "\n"
        );
    }

    #[test]
    fn final_step_is_clamped() {
        let t = sample_times(0.0, 1.05, 0.1);
        assert_eq!(t.len(), 12);
        assert_eq!(*t.last().unwrap(), 1.05);
        assert_eq!(sample_times(0.0, 1.0, 0.1).len(), 11);
    }

    #[test]
    fn sampled_vehicle_interpolates() {
        let rows = read_trajectories(&export_trajectories(&constant_speed_ledger(), 1.0)).unwrap();
        let v = group_vehicles(rows).unwrap();
        assert_eq!(v.len(), 1);
        assert!((v[0].time_at(55.0).unwrap() - 5.5).abs() < 1e-12);
        assert_eq!(v[0].time_at(0.0), Some(0.0));
        assert_eq!(v[0].time_at(100.5), None);
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(matches!(
            read_trajectories("a,b\n1,2\n"),
            Err(CsvError::Header { .. })
        ));
    }
}
