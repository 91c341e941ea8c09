//! Frame-to-map object association: geometric gating, appearance scores and
//! an optimal one-to-one assignment per object class.

mod assignment;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

pub use assignment::max_weight_matching;

use crate::geometry::{
    epipolar_line, line_intersects_bbox, project_point, projection_matrix, quadric_center, quadric_from_ellipsoid,
    BBox, CameraIntrinsics, GeometryError, Pose,
};
use crate::pipeline::map::{MapDatabase, ObjectId};
use crate::vocabulary::{l1_score, BowVector};

/// Scores are integerized at this resolution before matching.
pub const SCORE_SCALE: f64 = 1e6;

/// One detection ready for association.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMeasurement {
    pub bbox: BBox,
    pub class: u32,
    pub score: f64,
    pub bow: BowVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateReason {
    /// Projected ellipsoid center lies inside the box.
    CenterInBox,
    /// Epipolar line of the latest observed box center crosses the box.
    EpipolarLine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGate {
    pub measurement: usize,
    pub candidates: Vec<(ObjectId, GateReason)>,
}

/// Scores of one class: rows are measurement indices, columns object ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: Vec<usize>,
    pub cols: Vec<ObjectId>,
    /// `entries[r][c]`; `None` marks an absent (gated-out) edge.
    pub entries: Vec<Vec<Option<f64>>>,
}

impl ScoreMatrix {
    pub fn from_entries(entries: Vec<Vec<Option<f64>>>) -> Self {
        let cols = entries.iter().map(|r| r.len()).max().unwrap_or(0);
        Self { rows: (0..entries.len()).collect(), cols: (0..cols as ObjectId).collect(), entries }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Matched column per row.
    pub matches: Vec<Option<usize>>,
    pub objective: f64,
    /// Objective on the integerized scores.
    pub integer_objective: i64,
}

/// Result for one measurement of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationOutcome {
    pub object: Option<ObjectId>,
    pub score: Option<f64>,
    /// Whether any same-class object passed the geometric gate.
    pub had_candidates: bool,
}

pub fn integerize(score: f64) -> i64 {
    (score * SCORE_SCALE).round() as i64
}

/// Geometric and class gate of one measurement against every map object.
pub fn gate_candidates(
    z: &SemanticMeasurement,
    index: usize,
    frame_pose: &Pose,
    k: &CameraIntrinsics,
    map: &MapDatabase,
) -> CandidateGate {
    let p = projection_matrix(frame_pose, k);
    let mut candidates = Vec::new();
    for (id, obj) in &map.objects {
        if obj.class != z.class {
            continue;
        }
        match &obj.ellipsoid {
            Some(e) => {
                let center = quadric_center(&quadric_from_ellipsoid(e));
                if project_point(&p, &center).is_some_and(|px| z.bbox.contains(&px)) {
                    candidates.push((*id, GateReason::CenterInBox));
                }
            }
            None => {
                let Some((kf, m)) = map.latest_observation(*id) else { continue };
                if epipolar_gate(&kf.pose, frame_pose, k, &m.bbox.center(), &z.bbox) {
                    candidates.push((*id, GateReason::EpipolarLine));
                }
            }
        }
    }
    CandidateGate { measurement: index, candidates }
}

fn epipolar_gate(from: &Pose, to: &Pose, k: &CameraIntrinsics, pixel: &Vector2<f64>, b: &BBox) -> bool {
    match epipolar_line(from, to, k, pixel) {
        Ok(line) => line_intersects_bbox(&line, b),
        Err(GeometryError::DegenerateBaseline) => {
            // no baseline: the pixel maps through the rotation-only homography
            let rel = to.compose(&from.inverse());
            let h = k.matrix() * rel.rotation * k.inverse_matrix();
            let x = h * pixel.push(1.0);
            x.z > 0.0 && b.contains(&Vector2::new(x.x / x.z, x.y / x.z))
        }
        Err(_) => false,
    }
}

/// `c_kj` = best L1 score between the measurement and the object's stored
/// per-keyframe appearance. Edges below `threshold` become absent.
pub fn score_matrix(
    measurements: &[SemanticMeasurement],
    gates: &[CandidateGate],
    map: &MapDatabase,
    threshold: f64,
) -> ScoreMatrix {
    let cols: Vec<ObjectId> = gates
        .iter()
        .flat_map(|g| g.candidates.iter().map(|(id, _)| *id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col_index: BTreeMap<ObjectId, usize> = cols.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut entries = vec![vec![None; cols.len()]; gates.len()];
    for (r, gate) in gates.iter().enumerate() {
        let z = &measurements[gate.measurement];
        for (id, _) in &gate.candidates {
            let score = appearance_score(&z.bow, *id, map);
            if score >= threshold {
                entries[r][col_index[id]] = Some(score);
            }
        }
    }
    ScoreMatrix { rows: gates.iter().map(|g| g.measurement).collect(), cols, entries }
}

fn appearance_score(bow: &BowVector, object: ObjectId, map: &MapDatabase) -> f64 {
    let Some(obj) = map.objects.get(&object) else { return 0.0 };
    obj.keyframes
        .iter()
        .filter_map(|kf| map.keyframes.get(kf)?.measurement_for(object))
        .filter_map(|m| l1_score(&m.bow, bow).ok())
        .fold(0.0, f64::max)
}

/// Exact maximum-score assignment on scores integerized at `1e-6`.
pub fn solve_assignment(m: &ScoreMatrix) -> Assignment {
    let weights: Vec<Vec<Option<i64>>> =
        m.entries.iter().map(|r| r.iter().map(|e| e.map(integerize)).collect()).collect();
    let matches = max_weight_matching(&weights);
    let mut objective = 0.0;
    let mut integer_objective = 0;
    for (r, c) in matches.iter().enumerate() {
        if let Some(c) = c {
            objective += m.entries[r][*c].unwrap();
            integer_objective += weights[r][*c].unwrap();
        }
    }
    Assignment { matches, objective, integer_objective }
}

/// Associate all measurements of a frame, one independent problem per class.
pub fn associate_frame(
    measurements: &[SemanticMeasurement],
    frame_pose: &Pose,
    k: &CameraIntrinsics,
    map: &MapDatabase,
    threshold: f64,
) -> Vec<AssociationOutcome> {
    let mut out = vec![AssociationOutcome { object: None, score: None, had_candidates: false }; measurements.len()];
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, z) in measurements.iter().enumerate() {
        by_class.entry(z.class).or_default().push(i);
    }
    for indices in by_class.values() {
        let gates: Vec<CandidateGate> =
            indices.iter().map(|&i| gate_candidates(&measurements[i], i, frame_pose, k, map)).collect();
        for g in &gates {
            out[g.measurement].had_candidates = !g.candidates.is_empty();
        }
        let m = score_matrix(measurements, &gates, map, threshold);
        let a = solve_assignment(&m);
        for (r, c) in a.matches.iter().enumerate() {
            if let Some(c) = c {
                let o = &mut out[m.rows[r]];
                o.object = Some(m.cols[*c]);
                o.score = m.entries[r][*c];
            }
        }
    }
    out
}
