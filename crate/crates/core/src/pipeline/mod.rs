//! Frame processing, keyframing, map ownership and run outputs.
//!
//! Each frame's detections are filtered, converted to bag-of-words vectors
//! with their class vocabulary and associated against the map at the pose
//! predicted from odometry. Every `T`-th frame becomes a semantic keyframe:
//! it is stored with its measurements, unmatched detections without any
//! gated candidate spawn new objects, and mapping (initialization plus
//! bundle adjustment) runs inline or on a worker thread.

pub mod config;
pub mod map;
pub mod mapping;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{associate_frame, SemanticMeasurement};
use crate::bundle_adjustment::CancelToken;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::simulator::{Dataset, FrameRecord};
use crate::vocabulary::{build_vocabulary, VocabularyError, VocabularyTree};

pub use config::{keyframe_policy, ConfigError, PipelineConfig};
pub use map::{
    KeyframeId, KeyframeMeasurement, MapDatabase, MapError, MapObject, ObjectId, OdometryLink, SemanticKeyframe,
};
pub use mapping::{MappingReport, MappingWorker};

pub const MAP_FILE: &str = "map.json";
pub const ASSOCIATIONS_FILE: &str = "associations.csv";
pub const BA_FILE: &str = "ba.csv";
pub const INIT_FILE: &str = "init.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {found} arrived, expected frame {expected}")]
    OutOfOrderFrame { expected: u64, found: u64 },
    #[error("map audit failed after keyframe {keyframe}: {problems:?}")]
    Audit { keyframe: KeyframeId, problems: Vec<String> },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One vocabulary tree per class label.
#[derive(Debug, Clone, Default)]
pub struct Vocabularies(pub BTreeMap<u32, VocabularyTree>);

impl Vocabularies {
    pub fn file_name(class: u32) -> String {
        format!("class_{class}.json")
    }

    /// Train one tree per detected class label; one document per detection.
    pub fn train(dataset: &Dataset, k: usize, levels: usize, seed: u64) -> Result<Self, VocabularyError> {
        let mut out = BTreeMap::new();
        for class in dataset.scene.spec.classes() {
            out.insert(class, train_class(dataset, class, k, levels, seed)?);
        }
        Ok(Self(out))
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), VocabularyError> {
        fs::create_dir_all(dir)?;
        for (class, tree) in &self.0 {
            tree.save(&dir.join(Self::file_name(*class)))?;
        }
        Ok(())
    }

    /// Load every `class_<id>.json` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, VocabularyError> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let Some(id) = name.strip_prefix("class_").and_then(|s| s.strip_suffix(".json")) else { continue };
            let Ok(class) = id.parse::<u32>() else { continue };
            let tree = VocabularyTree::load(&path)?;
            if tree.class_label() != class {
                return Err(VocabularyError::Format(format!("{name} holds class {}", tree.class_label())));
            }
            out.insert(class, tree);
        }
        Ok(Self(out))
    }
}

pub fn train_class(
    dataset: &Dataset,
    class: u32,
    k: usize,
    levels: usize,
    seed: u64,
) -> Result<VocabularyTree, VocabularyError> {
    let documents: Vec<_> = dataset
        .frames
        .iter()
        .flat_map(|f| f.detections.iter())
        .filter(|d| d.class == class)
        .map(|d| d.descriptors.clone())
        .collect();
    build_vocabulary(&documents, k, levels, class, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionStatus {
    SmallBox,
    FewDescriptors,
    NoVocabulary,
    Associated,
    Spawned,
    /// Matched nothing: a non-keyframe detection or a keyframe detection
    /// whose gated candidates were taken.
    Unassigned,
}

impl DetectionStatus {
    pub fn is_filtered(&self) -> bool {
        matches!(self, Self::SmallBox | Self::FewDescriptors | Self::NoVocabulary)
    }
}

/// One row of the association log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub frame: u64,
    pub detection: usize,
    pub class: u32,
    pub status: DetectionStatus,
    pub object: Option<ObjectId>,
    pub score: Option<f64>,
    pub had_candidates: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame: u64,
    pub pose_estimate: Pose,
    pub keyframe: Option<KeyframeId>,
    pub records: Vec<AssociationRecord>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    vocabularies: Vocabularies,
    intrinsics: CameraIntrinsics,
    anchor: Pose,
    map: Arc<RwLock<MapDatabase>>,
    worker: Option<MappingWorker>,
    next_frame: u64,
    last_keyframe: Option<KeyframeId>,
    last_mapped: Option<KeyframeId>,
    /// Odometry composed since the last keyframe.
    since_keyframe: Pose,
    frames_since_keyframe: u32,
    records: Vec<AssociationRecord>,
    reports: Vec<MappingReport>,
}

impl Pipeline {
    /// `anchor` is the pose of frame 0.
    pub fn new(cfg: PipelineConfig, vocabularies: Vocabularies, intrinsics: CameraIntrinsics, anchor: Pose) -> Self {
        let map = Arc::new(RwLock::new(MapDatabase::new()));
        let worker = (!cfg.ba_sync).then(|| MappingWorker::spawn(map.clone(), cfg.clone()));
        Self {
            cfg,
            vocabularies,
            intrinsics,
            anchor,
            map,
            worker,
            next_frame: 0,
            last_keyframe: None,
            last_mapped: None,
            since_keyframe: Pose::identity(),
            frames_since_keyframe: 0,
            records: Vec::new(),
            reports: Vec::new(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn map(&self) -> MapDatabase {
        self.map.read().unwrap().clone()
    }

    fn current_pose(&self) -> Pose {
        match self.last_keyframe {
            None => self.anchor,
            Some(id) => self.since_keyframe.compose(&self.map.read().unwrap().keyframes[&id].pose),
        }
    }

    pub fn process_frame(&mut self, frame: &FrameRecord) -> Result<FrameResult, PipelineError> {
        if frame.index != self.next_frame {
            return Err(PipelineError::OutOfOrderFrame { expected: self.next_frame, found: frame.index });
        }
        self.next_frame += 1;
        if frame.index > 0 {
            self.since_keyframe = frame.odometry.compose(&self.since_keyframe);
            self.frames_since_keyframe += 1;
        }
        let pose = self.current_pose().renormalized();

        let mut records: Vec<AssociationRecord> = Vec::with_capacity(frame.detections.len());
        let mut measurements = Vec::new();
        let mut measurement_rows = Vec::new();
        for (i, d) in frame.detections.iter().enumerate() {
            let mut rec = AssociationRecord {
                frame: frame.index,
                detection: i,
                class: d.class,
                status: DetectionStatus::Unassigned,
                object: None,
                score: None,
                had_candidates: false,
            };
            let tree = self.vocabularies.0.get(&d.class);
            if d.bbox.area() < self.cfg.min_bbox_area {
                rec.status = DetectionStatus::SmallBox;
            } else if d.descriptors.len() < self.cfg.min_descriptors {
                rec.status = DetectionStatus::FewDescriptors;
            } else if let Some(tree) = tree {
                measurements.push(SemanticMeasurement {
                    bbox: d.bbox,
                    class: d.class,
                    score: d.score,
                    bow: tree.transform(&d.descriptors)?,
                });
                measurement_rows.push(i);
            } else {
                rec.status = DetectionStatus::NoVocabulary;
            }
            records.push(rec);
        }

        let outcomes = {
            let map = self.map.read().unwrap();
            associate_frame(&measurements, &pose, &self.intrinsics, &map, self.cfg.assoc_threshold)
        };
        for (m, o) in outcomes.iter().enumerate() {
            let rec = &mut records[measurement_rows[m]];
            rec.had_candidates = o.had_candidates;
            rec.object = o.object;
            rec.score = o.score;
            if o.object.is_some() {
                rec.status = DetectionStatus::Associated;
            }
        }

        let mut keyframe = None;
        if keyframe_policy(frame.index, self.cfg.keyframe_interval) {
            let id = self.insert_keyframe(frame, &pose, &measurements, &measurement_rows, &mut records)?;
            keyframe = Some(id);
            self.on_keyframe(id)?;
        }
        self.records.extend_from_slice(&records);
        Ok(FrameResult { frame: frame.index, pose_estimate: pose, keyframe, records })
    }

    fn insert_keyframe(
        &mut self,
        frame: &FrameRecord,
        pose: &Pose,
        measurements: &[SemanticMeasurement],
        rows: &[usize],
        records: &mut [AssociationRecord],
    ) -> Result<KeyframeId, PipelineError> {
        let mut map = self.map.write().unwrap();
        let id = map.allocate_keyframe_id();
        let mut stored = Vec::with_capacity(measurements.len());
        for (m, z) in measurements.iter().enumerate() {
            let rec = &mut records[rows[m]];
            if rec.object.is_none() && !rec.had_candidates {
                rec.object = Some(map.create_object(z.class));
                rec.status = DetectionStatus::Spawned;
            }
            stored.push(KeyframeMeasurement {
                detection: rows[m],
                bbox: z.bbox,
                class: z.class,
                score: z.score,
                bow: z.bow.clone(),
                object: rec.object,
            });
        }
        let odometry = self.last_keyframe.map(|previous| OdometryLink {
            previous,
            relative: self.since_keyframe,
            frames: self.frames_since_keyframe,
        });
        map.insert_keyframe(SemanticKeyframe {
            id,
            frame_index: frame.index,
            pose: *pose,
            intrinsics: self.intrinsics,
            odometry,
            measurements: stored,
            observed_objects: Vec::new(),
        });
        let problems = map.audit();
        if !problems.is_empty() {
            return Err(PipelineError::Audit { keyframe: id, problems });
        }
        self.last_keyframe = Some(id);
        self.since_keyframe = Pose::identity();
        self.frames_since_keyframe = 0;
        Ok(id)
    }

    fn on_keyframe(&mut self, id: KeyframeId) -> Result<(), PipelineError> {
        match &self.worker {
            Some(w) => w.submit(id),
            None => {
                let mut map = self.map.write().unwrap();
                let report =
                    mapping::map_keyframe(&mut map, id, self.last_mapped, &self.cfg, &CancelToken::new(), &mut |_| {});
                self.reports.push(report);
                self.last_mapped = Some(id);
            }
        }
        Ok(())
    }

    /// Wait for pending mapping work and hand back the results.
    pub fn finish(mut self) -> RunResult {
        if let Some(w) = self.worker.take() {
            self.reports.extend(w.finish());
        }
        let map = self.map.read().unwrap().clone();
        RunResult { map, associations: self.records, mapping: self.reports }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub map: MapDatabase,
    pub associations: Vec<AssociationRecord>,
    pub mapping: Vec<MappingReport>,
}

/// Process a whole dataset, optionally paced at `replay_hz` when mapping
/// runs on the worker thread.
pub fn run_dataset(
    dataset: &Dataset,
    vocabularies: Vocabularies,
    cfg: &PipelineConfig,
) -> Result<RunResult, PipelineError> {
    let mut p = Pipeline::new(cfg.clone(), vocabularies, dataset.scene.spec.intrinsics, dataset.scene.anchor_pose);
    let pace = (!cfg.ba_sync && cfg.replay_hz > 0.0).then(|| Duration::from_secs_f64(1.0 / cfg.replay_hz));
    let start = Instant::now();
    for (i, f) in dataset.frames.iter().enumerate() {
        if let Some(period) = pace {
            let due = start + period * i as u32;
            std::thread::sleep(due.saturating_duration_since(Instant::now()));
        }
        p.process_frame(f)?;
    }
    Ok(p.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct BaRow {
    keyframe: KeyframeId,
    iteration: usize,
    cost: f64,
    damping: f64,
    accepted: bool,
    skipped: usize,
    cancelled: bool,
}

impl RunResult {
    /// Writes `map.json`, `associations.csv`, `ba.csv` and `init.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        self.map.save(&dir.join(MAP_FILE))?;
        let mut w = csv::Writer::from_path(dir.join(ASSOCIATIONS_FILE))?;
        for r in &self.associations {
            w.serialize(r)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join(BA_FILE))?;
        let mut wrote_header = false;
        for m in &self.mapping {
            let Some(ba) = &m.ba else { continue };
            for it in &ba.iterations {
                w.serialize(BaRow {
                    keyframe: m.keyframe,
                    iteration: it.iteration,
                    cost: it.cost,
                    damping: it.damping,
                    accepted: it.accepted,
                    skipped: it.skipped,
                    cancelled: ba.cancelled,
                })?;
                wrote_header = true;
            }
        }
        if !wrote_header {
            w.write_record(["keyframe", "iteration", "cost", "damping", "accepted", "skipped", "cancelled"])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join(INIT_FILE))?;
        w.write_record(["keyframe", "object", "observations", "success", "reprojection_px", "error"])?;
        for m in &self.mapping {
            for a in &m.inits {
                let (ok, px, err) = match &a.outcome {
                    Ok(px) => ("true", px.to_string(), String::new()),
                    Err(e) => ("false", String::new(), e.clone()),
                };
                w.write_record([
                    a.keyframe.to_string(),
                    a.object.to_string(),
                    a.observations.to_string(),
                    ok.into(),
                    px,
                    err,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn read_associations(path: &Path) -> Result<Vec<AssociationRecord>, PipelineError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::simulator::{desk_easy, generate, Detection, Trajectory};
    use crate::vocabulary::BinaryDescriptor;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn short_dataset() -> Dataset {
        let mut spec = desk_easy();
        spec.trajectory =
            Trajectory::Orbit { target: Vector3::zeros(), radius: 1.3, height: 0.7, frames: 24, revolutions: 0.2 };
        generate(&spec).unwrap()
    }

    #[test]
    fn small_boxes_are_filtered() {
        let data = short_dataset();
        let vocab = Vocabularies::train(&data, 3, 2, 0).unwrap();
        let mut p = Pipeline::new(PipelineConfig::default(), vocab, data.scene.spec.intrinsics, data.scene.anchor_pose);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = FrameRecord {
            index: 0,
            true_pose: data.scene.anchor_pose,
            odometry: Pose::identity(),
            detections: vec![Detection {
                bbox: BBox::new(100.0, 100.0, 110.0, 110.0),
                class: 0,
                score: 0.9,
                descriptors: (0..32).map(|_| BinaryDescriptor::random(&mut rng)).collect(),
                gt_object: Some(0),
            }],
        };
        let r = p.process_frame(&frame).unwrap();
        assert_eq!(r.records[0].status, DetectionStatus::SmallBox);
        assert!(p.map().objects.is_empty());
        assert_eq!(p.map().keyframes.len(), 1);
    }

    #[test]
    fn frames_must_arrive_in_order() {
        let data = short_dataset();
        let vocab = Vocabularies::train(&data, 3, 2, 0).unwrap();
        let mut p = Pipeline::new(PipelineConfig::default(), vocab, data.scene.spec.intrinsics, data.scene.anchor_pose);
        assert!(matches!(
            p.process_frame(&data.frames[1]),
            Err(PipelineError::OutOfOrderFrame { expected: 0, found: 1 })
        ));
    }

    #[test]
    fn repeated_frame_creates_no_duplicates() {
        let data = short_dataset();
        let vocab = Vocabularies::train(&data, 3, 3, 0).unwrap();
        let cfg = PipelineConfig { keyframe_interval: 1, ..PipelineConfig::default() };
        let mut p = Pipeline::new(cfg, vocab, data.scene.spec.intrinsics, data.scene.anchor_pose);
        p.process_frame(&data.frames[0]).unwrap();
        let objects = p.map().objects.len();
        assert!(objects > 0);
        let again = FrameRecord { index: 1, odometry: Pose::identity(), ..data.frames[0].clone() };
        let r = p.process_frame(&again).unwrap();
        assert_eq!(p.map().objects.len(), objects);
        assert!(r.records.iter().filter(|r| !r.status.is_filtered()).all(|r| r.status == DetectionStatus::Associated));
    }

    #[test]
    fn first_keyframe_only_stores() {
        let data = short_dataset();
        let vocab = Vocabularies::train(&data, 3, 2, 0).unwrap();
        let mut p = Pipeline::new(PipelineConfig::default(), vocab, data.scene.spec.intrinsics, data.scene.anchor_pose);
        let r = p.process_frame(&data.frames[0]).unwrap();
        assert_eq!(r.keyframe, Some(0));
        let res = p.finish();
        assert_eq!(res.mapping.len(), 1);
        assert!(res.mapping[0].inits.is_empty());
        assert!(res.mapping[0].ba.is_none());
        assert!(res.map.objects.values().all(|o| o.ellipsoid.is_none() && o.observation_count == 1));
    }

    #[test]
    fn outputs_round_trip() {
        let data = short_dataset();
        let vocab = Vocabularies::train(&data, 3, 2, 0).unwrap();
        let res = run_dataset(&data, vocab, &PipelineConfig { min_obs: 4, ..PipelineConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        res.write(dir.path()).unwrap();
        assert_eq!(read_associations(&dir.path().join(ASSOCIATIONS_FILE)).unwrap(), res.associations);
        assert_eq!(MapDatabase::load(&dir.path().join(MAP_FILE)).unwrap(), res.map);
    }
}
