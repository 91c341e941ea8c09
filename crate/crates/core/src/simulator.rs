//! Synthetic desk scenes: ground-truth ellipsoids, camera trajectories,
//! noisy detections with binary descriptors, and noisy odometry.
//!
//! A dataset on disk is a directory with `scene.json` (the spec, its
//! fingerprint and the true first pose) and `frames.jsonl` (one
//! [`FrameRecord`] per line). Poses are world-to-camera, lengths in meters,
//! boxes in pixels.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bundle_adjustment::lie::so3_exp;
use crate::bundle_adjustment::retract_pose;
use crate::geometry::{
    conic_to_bbox, project_quadric, projection_matrix, quadric_from_ellipsoid, BBox, CameraIntrinsics, Ellipsoid, Pose,
};
use crate::initializer::{Observation, ObservationSet};
use crate::vocabulary::{hamming, BinaryDescriptor};

pub const SCENE_FILE: &str = "scene.json";
pub const FRAMES_FILE: &str = "frames.jsonl";
const SCENE_FORMAT: &str = "dqslam-scene";
const SCENE_VERSION: u32 = 1;

/// Minimum Hamming distance between descriptors of different objects.
pub const MIN_SIGNATURE_DISTANCE: u32 = 64;
/// Fraction of bits flipped from the class prototype per object.
const SIGNATURE_SPREAD: f64 = 0.3;
const MIN_BOX_EXTENT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene has no objects")]
    EmptyScene,
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could not generate distinct descriptor signatures")]
    SignatureSampling,
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Ground-truth object id.
    pub id: u32,
    pub class: u32,
    pub ellipsoid: Ellipsoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Camera circling `target` at `radius` and `height` above it, always
    /// looking at it.
    Orbit {
        target: Vector3<f64>,
        radius: f64,
        height: f64,
        frames: usize,
        /// Number of revolutions over the whole sequence.
        revolutions: f64,
    },
    Waypoints {
        poses: Vec<Pose>,
    },
}

impl Trajectory {
    pub fn frame_count(&self) -> usize {
        match self {
            Trajectory::Orbit { frames, .. } => *frames,
            Trajectory::Waypoints { poses } => poses.len(),
        }
    }

    pub fn poses(&self) -> Vec<Pose> {
        match self {
            Trajectory::Orbit { target, radius, height, frames, revolutions } => (0..*frames)
                .map(|f| {
                    let angle = std::f64::consts::TAU * revolutions * f as f64 / *frames as f64;
                    let eye = target + Vector3::new(radius * angle.cos(), radius * angle.sin(), *height);
                    Pose::look_at(eye, *target, Vector3::z())
                })
                .collect(),
            Trajectory::Waypoints { poses } => poses.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of each box coordinate (px).
    pub bbox_sigma: f64,
    pub dropout: f64,
    pub class_confusion: f64,
    pub descriptor_flip: f64,
    /// Per-axis rotation noise of each odometry step (rad).
    pub odom_sigma_rot: f64,
    /// Per-axis translation noise of each odometry step (m).
    pub odom_sigma_trans: f64,
    /// Probability that a frame contains one false detection.
    #[serde(default)]
    pub clutter_rate: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            bbox_sigma: 0.0,
            dropout: 0.0,
            class_confusion: 0.0,
            descriptor_flip: 0.0,
            odom_sigma_rot: 0.0,
            odom_sigma_trans: 0.0,
            clutter_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub objects: Vec<SceneObject>,
    pub trajectory: Trajectory,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseSpec,
    pub descriptors_per_object: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.objects.is_empty() {
            return Err(SimError::EmptyScene);
        }
        let n = &self.noise;
        for (name, p) in [
            ("dropout", n.dropout),
            ("class_confusion", n.class_confusion),
            ("descriptor_flip", n.descriptor_flip),
            ("clutter_rate", n.clutter_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidSpec(format!("{name} must be a probability, got {p}")));
            }
        }
        for (name, s) in [
            ("bbox_sigma", n.bbox_sigma),
            ("odom_sigma_rot", n.odom_sigma_rot),
            ("odom_sigma_trans", n.odom_sigma_trans),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(SimError::InvalidSpec(format!("{name} must be non-negative, got {s}")));
            }
        }
        if self.trajectory.frame_count() < 2 {
            return Err(SimError::InvalidSpec("at least 2 frames required".into()));
        }
        if !self.intrinsics.is_valid() {
            return Err(SimError::InvalidSpec("invalid intrinsics".into()));
        }
        if self.descriptors_per_object == 0 {
            return Err(SimError::InvalidSpec("descriptors_per_object must be positive".into()));
        }
        if self.objects.iter().any(|o| !o.ellipsoid.is_valid()) {
            return Err(SimError::InvalidSpec("invalid ellipsoid".into()));
        }
        let ids: BTreeSet<u32> = self.objects.iter().map(|o| o.id).collect();
        if ids.len() != self.objects.len() {
            return Err(SimError::InvalidSpec("duplicate object id".into()));
        }
        Ok(())
    }

    /// Same scene with every noise source switched off.
    pub fn noiseless(&self) -> Self {
        Self { noise: NoiseSpec::none(), ..self.clone() }
    }

    pub fn classes(&self) -> Vec<u32> {
        self.objects.iter().map(|o| o.class).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: u32,
    pub score: f64,
    pub descriptors: Vec<BinaryDescriptor>,
    /// Ground-truth object id; `None` for clutter.
    pub gt_object: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: u64,
    pub true_pose: Pose,
    /// Measured `x_index · x_(index-1)⁻¹`; identity for frame 0.
    pub odometry: Pose,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub spec: SceneSpec,
    /// True pose of frame 0, the reference the estimate starts from.
    pub anchor_pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scene: SceneFile,
    pub frames: Vec<FrameRecord>,
}

/// Exact, image-clipped box of an ellipsoid; `None` if not visible.
pub fn true_bbox(e: &Ellipsoid, pose: &Pose, k: &CameraIntrinsics) -> Option<BBox> {
    if pose.transform_point(&e.center).z <= 0.0 {
        return None;
    }
    let p = projection_matrix(pose, k);
    conic_to_bbox(&project_quadric(&p, &quadric_from_ellipsoid(e)), k.bounds()).ok()
}

/// Center in front of the camera and the projected box overlaps the image.
pub fn visible(e: &Ellipsoid, pose: &Pose, k: &CameraIntrinsics) -> bool {
    true_bbox(e, pose, k).is_some()
}

/// Per-object descriptor signatures. Objects of one class share 32 class
/// prototypes, each object flipping a fixed fraction of their bits; draws
/// are rejected until every cross-object descriptor pair is far apart.
fn signatures(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<BinaryDescriptor>>, SimError> {
    let n = spec.descriptors_per_object;
    let classes = spec.classes();
    let prototypes: Vec<Vec<BinaryDescriptor>> =
        classes.iter().map(|_| (0..n).map(|_| BinaryDescriptor::random(rng)).collect()).collect();
    let mut out: Vec<Vec<BinaryDescriptor>> = Vec::with_capacity(spec.objects.len());
    for o in &spec.objects {
        let proto = &prototypes[classes.binary_search(&o.class).unwrap()];
        let mut accepted = None;
        for _ in 0..1000 {
            let candidate: Vec<BinaryDescriptor> = proto.iter().map(|d| d.with_noise(SIGNATURE_SPREAD, rng)).collect();
            let far = out
                .iter()
                .all(|other| other.iter().all(|a| candidate.iter().all(|b| hamming(a, b) >= MIN_SIGNATURE_DISTANCE)));
            if far {
                accepted = Some(candidate);
                break;
            }
        }
        out.push(accepted.ok_or(SimError::SignatureSampling)?);
    }
    Ok(out)
}

fn noisy_box(exact: &BBox, sigma: f64, k: &CameraIntrinsics, rng: &mut ChaCha8Rng) -> BBox {
    let mut c = exact.to_array();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).unwrap();
        for v in &mut c {
            *v += normal.sample(rng);
        }
    }
    let axis = |lo: f64, hi: f64, limit: f64| -> (f64, f64) {
        let (mut lo, mut hi) = (lo.min(hi).clamp(0.0, limit), lo.max(hi).clamp(0.0, limit));
        if hi - lo < MIN_BOX_EXTENT {
            if lo + MIN_BOX_EXTENT <= limit {
                hi = lo + MIN_BOX_EXTENT;
            } else {
                lo = hi - MIN_BOX_EXTENT;
            }
        }
        (lo, hi)
    };
    let (xmin, xmax) = axis(c[0], c[2], k.width as f64);
    let (ymin, ymax) = axis(c[1], c[3], k.height as f64);
    BBox::new(xmin, ymin, xmax, ymax)
}

fn noisy_odometry(truth: &Pose, noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> Pose {
    if noise.odom_sigma_rot == 0.0 && noise.odom_sigma_trans == 0.0 {
        return *truth;
    }
    let mut d = nalgebra::Vector6::zeros();
    let rot = Normal::new(0.0, noise.odom_sigma_rot).unwrap();
    let trans = Normal::new(0.0, noise.odom_sigma_trans).unwrap();
    for i in 0..3 {
        d[i] = rot.sample(rng);
        d[i + 3] = trans.sample(rng);
    }
    retract_pose(truth, &d)
}

/// Generate a dataset; deterministic for a given spec.
pub fn generate(spec: &SceneSpec) -> Result<Dataset, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signatures = signatures(spec, &mut rng)?;
    let classes = spec.classes();
    let k = &spec.intrinsics;
    let noise = &spec.noise;
    let poses = spec.trajectory.poses();

    let mut frames = Vec::with_capacity(poses.len());
    for (f, pose) in poses.iter().enumerate() {
        let odometry = if f == 0 {
            Pose::identity()
        } else {
            noisy_odometry(&pose.compose(&poses[f - 1].inverse()), noise, &mut rng)
        };
        let mut detections = Vec::new();
        for (o, sig) in spec.objects.iter().zip(&signatures) {
            let Some(exact) = true_bbox(&o.ellipsoid, pose, k) else { continue };
            if rng.gen_bool(noise.dropout) {
                continue;
            }
            let bbox = noisy_box(&exact, noise.bbox_sigma, k, &mut rng);
            let mut class = o.class;
            if classes.len() > 1 && rng.gen_bool(noise.class_confusion) {
                let others: Vec<u32> = classes.iter().copied().filter(|&c| c != o.class).collect();
                class = others[rng.gen_range(0..others.len())];
            }
            let score = rng.gen_range(0.5..1.0);
            let descriptors = sig.iter().map(|d| d.with_noise(noise.descriptor_flip, &mut rng)).collect();
            detections.push(Detection { bbox, class, score, descriptors, gt_object: Some(o.id) });
        }
        if noise.clutter_rate > 0.0 && rng.gen_bool(noise.clutter_rate) {
            let w = rng.gen_range(20.0..120.0);
            let h = rng.gen_range(20.0..120.0);
            let x = rng.gen_range(0.0..(k.width as f64 - w));
            let y = rng.gen_range(0.0..(k.height as f64 - h));
            detections.push(Detection {
                bbox: BBox::new(x, y, x + w, y + h),
                class: classes[rng.gen_range(0..classes.len())],
                score: rng.gen_range(0.5..1.0),
                descriptors: (0..spec.descriptors_per_object).map(|_| BinaryDescriptor::random(&mut rng)).collect(),
                gt_object: None,
            });
        }
        frames.push(FrameRecord { index: f as u64, true_pose: *pose, odometry, detections });
    }
    Ok(Dataset {
        scene: SceneFile {
            format: SCENE_FORMAT.into(),
            version: SCENE_VERSION,
            fingerprint: spec.fingerprint(),
            spec: spec.clone(),
            anchor_pose: poses[0],
        },
        frames,
    })
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SCENE_FILE), serde_json::to_string_pretty(&self.scene)? + "\n")?;
        let mut w = BufWriter::new(fs::File::create(dir.join(FRAMES_FILE))?);
        for f in &self.frames {
            serde_json::to_writer(&mut w, f)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, SimError> {
        let scene: SceneFile = serde_json::from_str(&fs::read_to_string(dir.join(SCENE_FILE))?)?;
        if scene.format != SCENE_FORMAT || scene.version != SCENE_VERSION {
            return Err(SimError::Format(format!("unsupported scene format {} v{}", scene.format, scene.version)));
        }
        let mut frames = Vec::new();
        for line in BufReader::new(fs::File::open(dir.join(FRAMES_FILE))?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                frames.push(serde_json::from_str::<FrameRecord>(&line)?);
            }
        }
        Ok(Self { scene, frames })
    }
}

/// Intrinsics of a 640×480 camera.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480)
}

/// Objects resting on a desk top (the `z = 0` plane) inside a `w × d` area
/// centered at the origin, with centers kept apart.
fn desk_objects(count: usize, classes: u32, w: f64, d: f64, seed: u64) -> Vec<SceneObject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<SceneObject> = Vec::new();
    while out.len() < count {
        let axes = Vector3::new(rng.gen_range(0.04..0.12), rng.gen_range(0.04..0.12), rng.gen_range(0.04..0.15));
        let center = Vector3::new(rng.gen_range(-w / 2.0..w / 2.0), rng.gen_range(-d / 2.0..d / 2.0), axes.z);
        if out.iter().any(|o| (o.ellipsoid.center - center).xy().norm() < 0.22) {
            continue;
        }
        let yaw = rng.gen_range(0.0..std::f64::consts::PI);
        let id = out.len() as u32;
        out.push(SceneObject {
            id,
            class: id % classes,
            ellipsoid: Ellipsoid::new(so3_exp(&Vector3::new(0.0, 0.0, yaw)), center, axes),
        });
    }
    out
}

pub fn desk_easy() -> SceneSpec {
    SceneSpec {
        name: "desk-easy".into(),
        objects: desk_objects(8, 3, 1.0, 0.7, 11),
        trajectory: Trajectory::Orbit {
            target: Vector3::zeros(),
            radius: 1.3,
            height: 0.7,
            frames: 120,
            revolutions: 1.0,
        },
        intrinsics: default_intrinsics(),
        noise: NoiseSpec {
            bbox_sigma: 1.0,
            dropout: 0.05,
            class_confusion: 0.0,
            descriptor_flip: 0.02,
            odom_sigma_rot: 0.001,
            odom_sigma_trans: 0.001,
            clutter_rate: 0.0,
        },
        descriptors_per_object: 32,
        seed: 1,
    }
}

pub fn desk_hard() -> SceneSpec {
    SceneSpec {
        name: "desk-hard".into(),
        objects: desk_objects(12, 4, 1.2, 0.8, 12),
        trajectory: Trajectory::Orbit {
            target: Vector3::zeros(),
            radius: 1.4,
            height: 0.7,
            frames: 240,
            revolutions: 1.0,
        },
        intrinsics: default_intrinsics(),
        noise: NoiseSpec {
            bbox_sigma: 2.0,
            dropout: 0.15,
            class_confusion: 0.05,
            descriptor_flip: 0.05,
            odom_sigma_rot: 0.002,
            odom_sigma_trans: 0.002,
            clutter_rate: 0.0,
        },
        descriptors_per_object: 32,
        seed: 2,
    }
}

/// Single-object initialization study: for each seed a random ellipsoid is
/// viewed along an arc; the trial for observation count `n` uses the first
/// `n` views, so counts are nested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitStudySpec {
    pub counts: Vec<usize>,
    pub seeds: u64,
    pub base_seed: u64,
    pub bbox_sigma: f64,
    /// Arc spanned by the largest count (degrees).
    pub arc_degrees: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Default for InitStudySpec {
    fn default() -> Self {
        Self {
            counts: vec![5, 10, 15, 20],
            seeds: 100,
            base_seed: 1000,
            bbox_sigma: 2.0,
            arc_degrees: 90.0,
            intrinsics: default_intrinsics(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitTrial {
    pub seed: u64,
    pub count: usize,
    pub truth: Ellipsoid,
    pub observations: ObservationSet,
}

impl InitTrial {
    /// Mean depth of the object center over the views.
    pub fn mean_depth(&self) -> f64 {
        let o = &self.observations.observations;
        o.iter().map(|v| v.pose.transform_point(&self.truth.center).z).sum::<f64>() / o.len() as f64
    }
}

/// All trials, ordered by seed then count.
pub fn init_study_trials(spec: &InitStudySpec) -> Vec<InitTrial> {
    let max_count = spec.counts.iter().copied().max().unwrap_or(0);
    let mut trials = Vec::with_capacity(spec.counts.len() * spec.seeds as usize);
    for s in 0..spec.seeds {
        let seed = spec.base_seed + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = Ellipsoid::new(
            so3_exp(&Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))),
            Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.2)),
            Vector3::new(rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2)),
        );
        let start = rng.gen_range(0.0..std::f64::consts::TAU);
        let arc = spec.arc_degrees.to_radians();
        let mut views = Vec::new();
        let mut attempts = 0;
        while views.len() < max_count && attempts < 100 * max_count.max(1) {
            attempts += 1;
            let step = if max_count > 1 { views.len() as f64 / (max_count - 1) as f64 } else { 0.0 };
            let angle = start + arc * step;
            let radius = rng.gen_range(0.9..1.6);
            let height = rng.gen_range(0.3..0.9);
            let eye = truth.center + Vector3::new(radius * angle.cos(), radius * angle.sin(), height);
            let aim = truth.center
                + Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            let pose = Pose::look_at(eye, aim, Vector3::z());
            let Some(exact) = true_bbox(&truth, &pose, &spec.intrinsics) else { continue };
            let bbox = noisy_box(&exact, spec.bbox_sigma, &spec.intrinsics, &mut rng);
            views.push(Observation { pose, intrinsics: spec.intrinsics, bbox });
        }
        for &count in &spec.counts {
            trials.push(InitTrial {
                seed,
                count,
                truth,
                observations: ObservationSet::new(views[..count.min(views.len())].to_vec()),
            });
        }
    }
    trials
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Benchmark {
    Scene(SceneSpec),
    InitStudy(InitStudySpec),
}

pub fn standard_benchmarks() -> Vec<(&'static str, Benchmark)> {
    vec![
        ("desk-easy", Benchmark::Scene(desk_easy())),
        ("desk-hard", Benchmark::Scene(desk_hard())),
        ("init-study", Benchmark::InitStudy(InitStudySpec::default())),
    ]
}

pub fn benchmark(name: &str) -> Option<Benchmark> {
    standard_benchmarks().into_iter().find(|(n, _)| *n == name).map(|(_, b)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;

    fn small_spec() -> SceneSpec {
        let mut s = desk_easy();
        s.trajectory =
            Trajectory::Orbit { target: Vector3::zeros(), radius: 1.3, height: 0.7, frames: 12, revolutions: 0.2 };
        s
    }

    #[test]
    fn noiseless_boxes_and_odometry_are_exact() {
        let spec = small_spec().noiseless();
        let data = generate(&spec).unwrap();
        let mut pose = data.scene.anchor_pose;
        let mut seen = 0;
        for f in &data.frames {
            pose = f.odometry.compose(&pose);
            assert_relative_eq!(pose.rotation, f.true_pose.rotation, epsilon = 1e-9);
            assert_relative_eq!(pose.translation, f.true_pose.translation, epsilon = 1e-9);
            for d in &f.detections {
                let o = &spec.objects[d.gt_object.unwrap() as usize];
                assert_eq!(d.bbox, true_bbox(&o.ellipsoid, &f.true_pose, &spec.intrinsics).unwrap());
                assert_eq!(d.class, o.class);
                seen += 1;
            }
        }
        assert!(seen > 0);
        assert_eq!(data.frames[0].odometry, Pose::identity());
    }

    #[test]
    fn full_dropout_removes_everything() {
        let mut spec = small_spec();
        spec.noise.dropout = 1.0;
        assert!(generate(&spec).unwrap().frames.iter().all(|f| f.detections.is_empty()));
    }

    #[test]
    fn files_are_deterministic() {
        let spec = small_spec();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&spec).unwrap().write(a.path()).unwrap();
        generate(&spec).unwrap().write(b.path()).unwrap();
        for f in [SCENE_FILE, FRAMES_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let back = Dataset::read(a.path()).unwrap();
        assert_eq!(back, generate(&spec).unwrap());
    }

    #[test]
    fn boxes_are_valid_and_on_image() {
        let data = generate(&desk_hard()).unwrap();
        for f in &data.frames {
            for d in &f.detections {
                assert!(d.bbox.is_valid());
                assert!(d.bbox.width() >= MIN_BOX_EXTENT - 1e-12 && d.bbox.height() >= MIN_BOX_EXTENT - 1e-12);
                assert!(d.bbox.xmin >= 0.0 && d.bbox.xmax <= 640.0 && d.bbox.ymin >= 0.0 && d.bbox.ymax <= 480.0);
                assert!((0.5..1.0).contains(&d.score));
            }
        }
    }

    #[test]
    fn signatures_are_separated() {
        let spec = desk_hard();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sig = signatures(&spec, &mut rng).unwrap();
        for (i, a) in sig.iter().enumerate() {
            for b in &sig[i + 1..] {
                for x in a {
                    for y in b {
                        assert!(hamming(x, y) >= MIN_SIGNATURE_DISTANCE);
                    }
                }
            }
        }
    }

    #[test]
    fn visibility_examples() {
        let k = default_intrinsics();
        let e = Ellipsoid::sphere(Vector3::new(0.0, 0.0, 5.0), 0.1);
        assert!(visible(&e, &Pose::identity(), &k));
        let behind = Ellipsoid::sphere(Vector3::new(0.0, 0.0, -5.0), 0.1);
        assert!(!visible(&behind, &Pose::identity(), &k));
    }

    #[test]
    fn visibility_matches_point_sampling() {
        let k = default_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 100 {
            let e = Ellipsoid::new(
                so3_exp(&Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))),
                Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..6.0)),
                Vector3::new(rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4)),
            );
            let pose = Pose::identity();
            let p = projection_matrix(&pose, &k);
            // box of densely sampled surface points, only when all lie in front
            let mut lo = Vector2::repeat(f64::INFINITY);
            let mut hi = Vector2::repeat(f64::NEG_INFINITY);
            let mut all_front = true;
            for i in 0..60 {
                for j in 0..120 {
                    let th = std::f64::consts::PI * (i as f64 + 0.5) / 60.0;
                    let ph = std::f64::consts::TAU * j as f64 / 120.0;
                    let u = Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
                    match crate::geometry::project_point(&p, &e.surface_point(&u)) {
                        Some(px) => {
                            lo = lo.inf(&px);
                            hi = hi.sup(&px);
                        }
                        None => all_front = false,
                    }
                }
            }
            let oracle = all_front && hi.x > 0.0 && lo.x < 640.0 && hi.y > 0.0 && lo.y < 480.0;
            let margin = [hi.x, 640.0 - lo.x, hi.y, 480.0 - lo.y].iter().map(|m| m.abs()).fold(f64::INFINITY, f64::min);
            if all_front && margin < 3.0 {
                continue;
            }
            assert_eq!(visible(&e, &pose, &k), oracle, "{e:?}");
            checked += 1;
        }
    }

    #[test]
    fn presets_generate_and_are_stable() {
        for (name, b) in standard_benchmarks() {
            assert_eq!(benchmark(name), Some(b.clone()));
            match b {
                Benchmark::Scene(s) => {
                    assert_eq!(s.name, name);
                    assert_eq!(
                        s.fingerprint(),
                        benchmark(name)
                            .map(|b| match b {
                                Benchmark::Scene(s) => s.fingerprint(),
                                _ => unreachable!(),
                            })
                            .unwrap()
                    );
                    generate(&s).unwrap();
                }
                Benchmark::InitStudy(s) => {
                    assert_eq!(init_study_trials(&s).len(), 100 * s.counts.len());
                }
            }
        }
        let easy = desk_easy();
        assert_eq!((easy.objects.len(), easy.classes().len(), easy.trajectory.frame_count()), (8, 3, 120));
        let hard = desk_hard();
        assert_eq!((hard.objects.len(), hard.classes().len(), hard.trajectory.frame_count()), (12, 4, 240));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small_spec();
        s.objects.clear();
        assert!(matches!(generate(&s), Err(SimError::EmptyScene)));
        let mut s = small_spec();
        s.noise.dropout = 1.5;
        assert!(matches!(generate(&s), Err(SimError::InvalidSpec(_))));
    }
}
