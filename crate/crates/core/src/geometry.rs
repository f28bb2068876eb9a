//! Intersection topology: paths through the control zone, the conflict
//! points along each path and which paths meet at each conflict point.
//!
//! Positions are arc lengths measured from the control-zone entry of a
//! path. No planar geometry is modelled; vehicles only move
//! longitudinally along their path.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub type PathId = u32;
pub type ConflictId = u32;

/// Name of the built-in four-approach layout.
pub const FOUR_LEG_12PATH: &str = "four-leg-12path";

/// Control-zone length of every path in the built-in layout (m).
pub const DEFAULT_PATH_LENGTH: f64 = 100.0;

/// Conflict positions shared by every path of the built-in layout (m).
pub const DEFAULT_CONFLICT_POSITIONS: [f64; 3] = [40.0, 50.0, 60.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("malformed layout section: {0}")]
    Malformed(String),
    #[error("unknown built-in layout `{0}`")]
    UnknownBuiltin(String),
    #[error("duplicate path id {0}")]
    DuplicatePath(PathId),
    #[error("path {path_id}: length must be positive and finite, got {length}")]
    BadLength { path_id: PathId, length: f64 },
    #[error("path {path_id}: conflict {conflict_id} at {position} m lies outside (0, {length})")]
    PositionOutOfRange {
        path_id: PathId,
        conflict_id: ConflictId,
        position: f64,
        length: f64,
    },
    #[error(
        "path {path_id}: conflict positions are not strictly increasing at conflict {conflict_id}"
    )]
    NonMonotonePositions {
        path_id: PathId,
        conflict_id: ConflictId,
    },
    #[error("path {path_id}: conflict {conflict_id} declared twice")]
    RepeatedConflict {
        path_id: PathId,
        conflict_id: ConflictId,
    },
    #[error("conflict {0} involves fewer than two paths")]
    LonelyConflict(ConflictId),
    #[error("unknown path {0}")]
    UnknownPath(PathId),
}

/// A conflict point as seen from one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictPosition {
    pub conflict_id: ConflictId,
    pub position: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathDescriptor {
    pub path_id: PathId,
    pub length: f64,
    #[serde(default)]
    pub conflicts: Vec<ConflictPosition>,
}

impl PathDescriptor {
    pub fn conflict_positions(&self) -> impl Iterator<Item = f64> + '_ {
        self.conflicts.iter().map(|c| c.position)
    }
}

/// One participant of a conflict point: the path and the position of the
/// point along that path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictEntry {
    pub path_id: PathId,
    pub position: f64,
}

/// A conflict on the queried path together with the other paths that
/// share it.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    pub conflict_id: ConflictId,
    pub own_position: f64,
    pub others: Vec<ConflictEntry>,
}

/// Validated intersection layout. Construct with [`IntersectionLayout::new`],
/// [`load_layout`] or [`IntersectionLayout::four_leg_12path`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionLayout {
    paths: Vec<PathDescriptor>,
    conflict_map: BTreeMap<ConflictId, Vec<ConflictEntry>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    paths: Option<Vec<PathDescriptor>>,
}

impl IntersectionLayout {
    pub fn new(paths: Vec<PathDescriptor>) -> Result<Self, LayoutError> {
        let mut seen = BTreeSet::new();
        let mut conflict_map: BTreeMap<ConflictId, Vec<ConflictEntry>> = BTreeMap::new();
        for path in &paths {
            if !seen.insert(path.path_id) {
                return Err(LayoutError::DuplicatePath(path.path_id));
            }
            if !(path.length.is_finite() && path.length > 0.0) {
                return Err(LayoutError::BadLength {
                    path_id: path.path_id,
                    length: path.length,
                });
            }
            let mut previous = f64::NEG_INFINITY;
            let mut ids = BTreeSet::new();
            for c in &path.conflicts {
                if !(c.position > 0.0 && c.position < path.length) {
                    return Err(LayoutError::PositionOutOfRange {
                        path_id: path.path_id,
                        conflict_id: c.conflict_id,
                        position: c.position,
                        length: path.length,
                    });
                }
                if c.position <= previous {
                    return Err(LayoutError::NonMonotonePositions {
                        path_id: path.path_id,
                        conflict_id: c.conflict_id,
                    });
                }
                if !ids.insert(c.conflict_id) {
                    return Err(LayoutError::RepeatedConflict {
                        path_id: path.path_id,
                        conflict_id: c.conflict_id,
                    });
                }
                previous = c.position;
                conflict_map
                    .entry(c.conflict_id)
                    .or_default()
                    .push(ConflictEntry {
                        path_id: path.path_id,
                        position: c.position,
                    });
            }
        }
        if let Some((&id, _)) = conflict_map.iter().find(|(_, e)| e.len() < 2) {
            return Err(LayoutError::LonelyConflict(id));
        }
        Ok(Self {
            paths,
            conflict_map,
        })
    }

    /// Four approaches with left, through and right movements each.
    ///
    /// Approach `a` (0..4, counter-clockwise) owns paths `3a+1` (left),
    /// `3a+2` (through) and `3a+3` (right). Every path is 100 m long and
    /// meets three conflict points at 40, 50 and 60 m:
    ///
    /// * through `a`: crosses through `a+1` at 40 m, the opposing left turn
    ///   at 50 m and through `a-1` at 60 m;
    /// * left `a`: crosses the opposing left at 40 m, the opposing through
    ///   at 50 m and merges with right turn `a+2` at 60 m;
    /// * right `a`: shares nominal points with right `a+1` (40 m) and right
    ///   `a-1` (50 m), and merges with left `a-2` at 60 m.
    ///
    /// Eighteen conflict points in total, each shared by exactly two paths.
    pub fn four_leg_12path() -> Self {
        let left = |a: u32| 3 * (a % 4) + 1;
        let through = |a: u32| 3 * (a % 4) + 2;
        let right = |a: u32| 3 * (a % 4) + 3;
        // conflict ids by family
        let through_x = |a: u32| 1 + (a % 4); // through a with through a+1
        let left_through = |a: u32| 5 + (a % 4); // left a with through a+2
        let left_left = |a: u32| 9 + (a % 2); // opposing lefts
        let merge = |a: u32| 11 + (a % 4); // left a with right a+2
        let right_right = |a: u32| 15 + (a % 4); // right a with right a+1

        let [p1, p2, p3] = DEFAULT_CONFLICT_POSITIONS;
        let mut paths = Vec::with_capacity(12);
        for a in 0..4u32 {
            let mk = |path_id, ids: [u32; 3]| PathDescriptor {
                path_id,
                length: DEFAULT_PATH_LENGTH,
                conflicts: ids
                    .iter()
                    .zip([p1, p2, p3])
                    .map(|(&conflict_id, position)| ConflictPosition {
                        conflict_id,
                        position,
                    })
                    .collect(),
            };
            paths.push(mk(left(a), [left_left(a), left_through(a), merge(a)]));
            paths.push(mk(
                through(a),
                [through_x(a), left_through(a + 2), through_x(a + 3)],
            ));
            paths.push(mk(
                right(a),
                [right_right(a), right_right(a + 3), merge(a + 2)],
            ));
        }
        paths.sort_by_key(|p| p.path_id);
        Self::new(paths).expect("built-in layout is valid")
    }

    pub fn builtin(name: &str) -> Result<Self, LayoutError> {
        match name {
            FOUR_LEG_12PATH => Ok(Self::four_leg_12path()),
            other => Err(LayoutError::UnknownBuiltin(other.to_string())),
        }
    }

    pub fn paths(&self) -> &[PathDescriptor] {
        &self.paths
    }

    pub fn conflict_map(&self) -> &BTreeMap<ConflictId, Vec<ConflictEntry>> {
        &self.conflict_map
    }

    pub fn path(&self, path_id: PathId) -> Result<&PathDescriptor, LayoutError> {
        self.paths
            .iter()
            .find(|p| p.path_id == path_id)
            .ok_or(LayoutError::UnknownPath(path_id))
    }

    /// The layout as an explicit `{"paths": [...]}` config section.
    pub fn to_section(&self) -> Value {
        serde_json::to_value(LayoutSection {
            builtin: None,
            paths: Some(self.paths.clone()),
        })
        .expect("layout serializes")
    }
}

/// Parses and validates the `layout` section of a config document.
///
/// Accepts either `{"builtin": "four-leg-12path"}` or an explicit
/// `{"paths": [{"path_id", "length", "conflicts": [{"conflict_id", "position"}]}]}`.
pub fn load_layout(section: &Value) -> Result<IntersectionLayout, LayoutError> {
    let parsed: LayoutSection = serde_json::from_value(section.clone())
        .map_err(|e| LayoutError::Malformed(e.to_string()))?;
    match (parsed.builtin, parsed.paths) {
        (Some(name), None) => IntersectionLayout::builtin(&name),
        (None, Some(paths)) => IntersectionLayout::new(paths),
        (Some(_), Some(_)) => Err(LayoutError::Malformed(
            "give either `builtin` or `paths`, not both".into(),
        )),
        (None, None) => Err(LayoutError::Malformed(
            "expected `builtin` or `paths`".into(),
        )),
    }
}

/// Conflict points along `path_id` in travel order, each with the other
/// paths that share it.
pub fn conflicting_crossings(
    layout: &IntersectionLayout,
    path_id: PathId,
) -> Result<Vec<Crossing>, LayoutError> {
    let path = layout.path(path_id)?;
    Ok(path
        .conflicts
        .iter()
        .map(|c| Crossing {
            conflict_id: c.conflict_id,
            own_position: c.position,
            others: layout.conflict_map[&c.conflict_id]
                .iter()
                .filter(|e| e.path_id != path_id)
                .copied()
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({"paths": [
            {"path_id": 1, "length": 100.0, "conflicts": [{"conflict_id": 0, "position": 50.0}]},
            {"path_id": 2, "length": 100.0, "conflicts": [{"conflict_id": 0, "position": 50.0}]}
        ]})
    }

    #[test]
    fn minimal_crossing() {
        let layout = load_layout(&minimal()).unwrap();
        assert_eq!(layout.conflict_map().len(), 1);
        assert_eq!(layout.conflict_map()[&0].len(), 2);
        let c = conflicting_crossings(&layout, 1).unwrap();
        assert_eq!(
            c,
            vec![Crossing {
                conflict_id: 0,
                own_position: 50.0,
                others: vec![ConflictEntry {
                    path_id: 2,
                    position: 50.0
                }],
            }]
        );
    }

    #[test]
    fn builtin_by_name() {
        let layout = load_layout(&json!({"builtin": "four-leg-12path"})).unwrap();
        assert_eq!(layout.paths().len(), 12);
        for p in layout.paths() {
            assert_eq!(p.length, 100.0);
            let c = conflicting_crossings(&layout, p.path_id).unwrap();
            assert_eq!(c.len(), 3);
            assert!(c.iter().all(|x| !x.others.is_empty()));
            assert_eq!(
                c.iter().map(|x| x.own_position).collect::<Vec<_>>(),
                vec![40.0, 50.0, 60.0]
            );
        }
        assert_eq!(layout.conflict_map().len(), 18);
        assert!(layout.conflict_map().values().all(|e| e.len() == 2));
    }

    #[test]
    fn out_of_range_conflict() {
        let section = json!({"paths": [
            {"path_id": 1, "length": 100.0, "conflicts": [{"conflict_id": 0, "position": 120.0}]},
            {"path_id": 2, "length": 100.0, "conflicts": [{"conflict_id": 0, "position": 50.0}]}
        ]});
        assert!(matches!(
            load_layout(&section),
            Err(LayoutError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn rejects_malformed() {
        let dup = json!({"paths": [
            {"path_id": 1, "length": 100.0},
            {"path_id": 1, "length": 80.0}
        ]});
        assert_eq!(load_layout(&dup), Err(LayoutError::DuplicatePath(1)));

        let lonely = json!({"paths": [
            {"path_id": 1, "length": 100.0, "conflicts": [{"conflict_id": 7, "position": 10.0}]}
        ]});
        assert_eq!(load_layout(&lonely), Err(LayoutError::LonelyConflict(7)));

        let unordered = json!({"paths": [
            {"path_id": 1, "length": 100.0, "conflicts": [
                {"conflict_id": 0, "position": 60.0}, {"conflict_id": 1, "position": 40.0}]},
            {"path_id": 2, "length": 100.0, "conflicts": [
                {"conflict_id": 0, "position": 50.0}, {"conflict_id": 1, "position": 55.0}]}
        ]});
        assert!(matches!(
            load_layout(&unordered),
            Err(LayoutError::NonMonotonePositions { path_id: 1, .. })
        ));

        let at_entry = json!({"paths": [
            {"path_id": 1, "length": 100.0, "conflicts": [{"conflict_id": 0, "position": 0.0}]},
            {"path_id": 2, "length": 100.0, "conflicts": [{"conflict_id": 0, "position": 50.0}]}
        ]});
        assert!(load_layout(&at_entry).is_err());

        assert!(matches!(
            load_layout(&json!({"builtin": "roundabout"})),
            Err(LayoutError::UnknownBuiltin(_))
        ));
        assert!(load_layout(&json!({"paths": [{"path_id": 1, "length": -1.0}]})).is_err());
    }

    #[test]
    fn empty_conflicts_and_unknown_path() {
        let section = json!({"paths": [{"path_id": 4, "length": 30.0}]});
        let layout = load_layout(&section).unwrap();
        assert!(conflicting_crossings(&layout, 4).unwrap().is_empty());
        assert_eq!(
            conflicting_crossings(&layout, 5),
            Err(LayoutError::UnknownPath(5))
        );
    }

    #[test]
    fn section_round_trip() {
        let layout = IntersectionLayout::four_leg_12path();
        let text = serde_json::to_string(&layout.to_section()).unwrap();
        let back = load_layout(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, layout);
    }
}
