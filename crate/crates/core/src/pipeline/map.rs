//! Map database: objects, semantic keyframes and the links between them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, CameraIntrinsics, Ellipsoid, Pose};
use crate::initializer::{Observation, ObservationSet};
use crate::vocabulary::BowVector;

pub type ObjectId = u64;
pub type KeyframeId = u64;

pub const MAP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map schema version {found} is not supported (expected {MAP_SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapObject {
    pub id: ObjectId,
    pub class: u32,
    pub ellipsoid: Option<Ellipsoid>,
    /// Observing keyframes in insertion order.
    pub keyframes: Vec<KeyframeId>,
    pub observation_count: u32,
}

/// One detection stored in a keyframe, associated or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeMeasurement {
    /// Index of the detection in its source frame.
    pub detection: usize,
    pub bbox: BBox,
    pub class: u32,
    pub score: f64,
    pub bow: BowVector,
    pub object: Option<ObjectId>,
}

/// Odometry between a keyframe and its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryLink {
    pub previous: KeyframeId,
    /// Relative pose `x_this · x_previous⁻¹` composed from the frame odometry.
    pub relative: Pose,
    /// Number of frame-to-frame measurements composed into `relative`.
    pub frames: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticKeyframe {
    pub id: KeyframeId,
    pub frame_index: u64,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub odometry: Option<OdometryLink>,
    pub measurements: Vec<KeyframeMeasurement>,
    pub observed_objects: Vec<ObjectId>,
}

impl SemanticKeyframe {
    pub fn measurement_for(&self, object: ObjectId) -> Option<&KeyframeMeasurement> {
        self.measurements.iter().find(|m| m.object == Some(object))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDatabase {
    pub schema_version: u32,
    pub objects: BTreeMap<ObjectId, MapObject>,
    pub keyframes: BTreeMap<KeyframeId, SemanticKeyframe>,
    pub next_object_id: ObjectId,
    pub next_keyframe_id: KeyframeId,
}

impl Default for MapDatabase {
    fn default() -> Self {
        Self::new()
    }
}

impl MapDatabase {
    pub fn new() -> Self {
        Self {
            schema_version: MAP_SCHEMA_VERSION,
            objects: BTreeMap::new(),
            keyframes: BTreeMap::new(),
            next_object_id: 0,
            next_keyframe_id: 0,
        }
    }

    pub fn create_object(&mut self, class: u32) -> ObjectId {
        let id = self.next_object_id;
        self.next_object_id += 1;
        self.objects.insert(id, MapObject { id, class, ellipsoid: None, keyframes: Vec::new(), observation_count: 0 });
        id
    }

    pub fn allocate_keyframe_id(&mut self) -> KeyframeId {
        let id = self.next_keyframe_id;
        self.next_keyframe_id += 1;
        id
    }

    /// Insert a keyframe and link every associated measurement to its object.
    pub fn insert_keyframe(&mut self, mut kf: SemanticKeyframe) {
        let mut observed: Vec<ObjectId> = kf.measurements.iter().filter_map(|m| m.object).collect();
        observed.sort_unstable();
        observed.dedup();
        for &obj in &observed {
            if let Some(o) = self.objects.get_mut(&obj) {
                o.keyframes.push(kf.id);
                o.observation_count += 1;
            }
        }
        kf.observed_objects = observed;
        self.keyframes.insert(kf.id, kf);
    }

    pub fn latest_keyframe(&self) -> Option<&SemanticKeyframe> {
        self.keyframes.values().next_back()
    }

    /// Most recent stored observation of an object: keyframe pose and box.
    pub fn latest_observation(&self, object: ObjectId) -> Option<(&SemanticKeyframe, &KeyframeMeasurement)> {
        let o = self.objects.get(&object)?;
        let kf = self.keyframes.get(o.keyframes.last()?)?;
        Some((kf, kf.measurement_for(object)?))
    }

    pub fn observations(&self, object: ObjectId) -> ObservationSet {
        let Some(o) = self.objects.get(&object) else { return ObservationSet::default() };
        let observations = o
            .keyframes
            .iter()
            .filter_map(|id| self.keyframes.get(id))
            .filter_map(|kf| {
                kf.measurement_for(object).map(|m| Observation {
                    pose: kf.pose,
                    intrinsics: kf.intrinsics,
                    bbox: m.bbox,
                })
            })
            .collect();
        ObservationSet { observations }
    }

    /// Check referential integrity in both directions; returns a list of
    /// violations (empty when consistent).
    pub fn audit(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (id, o) in &self.objects {
            if *id != o.id {
                problems.push(format!("object key {id} holds id {}", o.id));
            }
            if *id >= self.next_object_id {
                problems.push(format!("object {id} not below id counter {}", self.next_object_id));
            }
            if o.observation_count as usize != o.keyframes.len() {
                problems.push(format!(
                    "object {id}: observation count {} but {} keyframes",
                    o.observation_count,
                    o.keyframes.len()
                ));
            }
            for w in o.keyframes.windows(2) {
                if w[0] >= w[1] {
                    problems.push(format!("object {id}: keyframes not strictly increasing"));
                }
            }
            for kf_id in &o.keyframes {
                match self.keyframes.get(kf_id) {
                    None => problems.push(format!("object {id} lists missing keyframe {kf_id}")),
                    Some(kf) => {
                        if !kf.observed_objects.contains(id) {
                            problems.push(format!("keyframe {kf_id} does not list object {id}"));
                        }
                    }
                }
            }
        }
        for (id, kf) in &self.keyframes {
            if *id != kf.id {
                problems.push(format!("keyframe key {id} holds id {}", kf.id));
            }
            if *id >= self.next_keyframe_id {
                problems.push(format!("keyframe {id} not below id counter {}", self.next_keyframe_id));
            }
            for m in &kf.measurements {
                if let Some(obj) = m.object {
                    if !kf.observed_objects.contains(&obj) {
                        problems.push(format!("keyframe {id}: measurement of {obj} not in observed list"));
                    }
                }
            }
            for obj in &kf.observed_objects {
                match self.objects.get(obj) {
                    None => problems.push(format!("keyframe {id} lists missing object {obj}")),
                    Some(o) => {
                        if !o.keyframes.contains(id) {
                            problems.push(format!("object {obj} does not list keyframe {id}"));
                        }
                        if o.class != kf.measurement_for(*obj).map(|m| m.class).unwrap_or(o.class) {
                            problems.push(format!("keyframe {id}: class mismatch for object {obj}"));
                        }
                    }
                }
                if kf.measurements.iter().filter(|m| m.object == Some(*obj)).count() != 1 {
                    problems.push(format!("keyframe {id}: object {obj} must have exactly one measurement"));
                }
            }
        }
        problems
    }

    pub fn to_json(&self) -> Result<String, MapError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, MapError> {
        let probe: serde_json::Value = serde_json::from_str(s)?;
        let found = probe.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MAP_SCHEMA_VERSION {
            return Err(MapError::SchemaVersion { found });
        }
        Ok(serde_json::from_value(probe)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
