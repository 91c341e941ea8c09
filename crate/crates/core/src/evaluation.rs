//! Ground-truth scoring: association accuracy via an optimal id
//! correspondence, box reprojection error of mapped objects, and the
//! initialization success table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::max_weight_matching;
use crate::geometry::{conic_to_bbox, project_quadric, projection_matrix, quadric_from_ellipsoid};
use crate::initializer::{initialize_object, InitMethod, InitializerConfig};
use crate::pipeline::map::{KeyframeId, MapDatabase, ObjectId};
use crate::pipeline::AssociationRecord;
use crate::simulator::{Dataset, InitTrial};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no measurement carries both a ground-truth and an assigned id")]
    EmptyOverlap,
    #[error("map has no initialized objects")]
    NoInitializedObjects,
    #[error("ground-truth and assignment sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("log refers to frame {0} detection {1}, which the dataset lacks")]
    UnknownDetection(u64, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Optimal correspondence between ground-truth ids and assigned ids.
#[derive(Debug, Clone, PartialEq)]
pub struct IdCorrespondence {
    /// `r(i, j)`: measurements labeled `i` in ground truth and `j` by the
    /// algorithm.
    pub reward: BTreeMap<(u64, u64), u64>,
    pub matching: Vec<(u64, u64)>,
    pub r_da: u64,
    pub r_max: u64,
    pub accuracy: f64,
    /// Measurements with a ground-truth id.
    pub labeled: usize,
    /// Fraction of labeled measurements that received an assigned id.
    pub coverage: f64,
}

pub fn da_accuracy(gt: &[Option<u64>], assigned: &[Option<u64>]) -> Result<IdCorrespondence, EvalError> {
    if gt.len() != assigned.len() {
        return Err(EvalError::LengthMismatch(gt.len(), assigned.len()));
    }
    let mut reward: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let labeled = gt.iter().filter(|g| g.is_some()).count();
    for (g, a) in gt.iter().zip(assigned) {
        if let (Some(g), Some(a)) = (g, a) {
            *reward.entry((*g, *a)).or_default() += 1;
        }
    }
    let r_max: u64 = reward.values().sum();
    if r_max == 0 {
        return Err(EvalError::EmptyOverlap);
    }
    let rows: Vec<u64> = reward.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let cols: Vec<u64> = reward.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().collect();
    let weights: Vec<Vec<Option<i64>>> =
        rows.iter().map(|r| cols.iter().map(|c| reward.get(&(*r, *c)).map(|v| *v as i64)).collect()).collect();
    let matching: Vec<(u64, u64)> =
        max_weight_matching(&weights).iter().enumerate().filter_map(|(i, j)| j.map(|j| (rows[i], cols[j]))).collect();
    let r_da = matching.iter().map(|k| reward[k]).sum();
    let covered = gt.iter().zip(assigned).filter(|(g, a)| g.is_some() && a.is_some()).count();
    Ok(IdCorrespondence {
        reward,
        matching,
        r_da,
        r_max,
        accuracy: r_da as f64 / r_max as f64,
        labeled,
        coverage: if labeled == 0 { 0.0 } else { covered as f64 / labeled as f64 },
    })
}

/// Ground-truth and assigned ids for every detection that passed the
/// measurement filters, joined on (frame, detection).
pub fn association_labels(
    dataset: &Dataset,
    records: &[AssociationRecord],
) -> Result<(Vec<Option<u64>>, Vec<Option<u64>>), EvalError> {
    let mut gt = Vec::new();
    let mut assigned = Vec::new();
    for r in records.iter().filter(|r| !r.status.is_filtered()) {
        let d = dataset
            .frames
            .get(r.frame as usize)
            .and_then(|f| f.detections.get(r.detection))
            .ok_or(EvalError::UnknownDetection(r.frame, r.detection))?;
        gt.push(d.gt_object.map(u64::from));
        assigned.push(r.object);
    }
    Ok((gt, assigned))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub object: ObjectId,
    pub keyframe: KeyframeId,
    pub error_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionReport {
    pub mean_px: f64,
    pub pairs: Vec<PairError>,
    /// Pairs whose predicted conic was not a visible ellipse.
    pub skipped: usize,
}

impl ReprojectionReport {
    pub fn per_object(&self) -> BTreeMap<ObjectId, (usize, f64)> {
        let mut out: BTreeMap<ObjectId, (usize, f64)> = BTreeMap::new();
        for p in &self.pairs {
            let e = out.entry(p.object).or_default();
            e.0 += 1;
            e.1 += p.error_px;
        }
        for v in out.values_mut() {
            v.1 /= v.0 as f64;
        }
        out
    }
}

/// Mean over (initialized object, observing keyframe) pairs of the mean
/// absolute difference of box coordinates.
pub fn reprojection_error(map: &MapDatabase) -> Result<ReprojectionReport, EvalError> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    let mut any = false;
    for (id, obj) in &map.objects {
        let Some(e) = &obj.ellipsoid else { continue };
        any = true;
        let q = quadric_from_ellipsoid(e);
        for kf_id in &obj.keyframes {
            let Some(kf) = map.keyframes.get(kf_id) else { continue };
            let Some(m) = kf.measurement_for(*id) else { continue };
            let c = project_quadric(&projection_matrix(&kf.pose, &kf.intrinsics), &q);
            match conic_to_bbox(&c, kf.intrinsics.bounds()) {
                Ok(b) => pairs.push(PairError { object: *id, keyframe: *kf_id, error_px: b.mean_abs_diff(&m.bbox) }),
                Err(_) => skipped += 1,
            }
        }
    }
    if !any {
        return Err(EvalError::NoInitializedObjects);
    }
    let mean_px =
        if pairs.is_empty() { 0.0 } else { pairs.iter().map(|p| p.error_px).sum::<f64>() / pairs.len() as f64 };
    Ok(ReprojectionReport { mean_px, pairs, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCell {
    pub method: InitMethod,
    pub count: usize,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
}

/// Success rate per method and observation count. Success means the
/// estimate passes validation. The pipeline's `min_obs` gate is not applied
/// here, so every count is attempted.
pub fn init_success_curve(trials: &[InitTrial], cfg: &InitializerConfig) -> Vec<SuccessCell> {
    let cfg = InitializerConfig { min_obs: 1, ..*cfg };
    let counts: BTreeSet<usize> = trials.iter().map(|t| t.count).collect();
    let mut cells = Vec::new();
    for method in [InitMethod::Quadratic, InitMethod::Svd] {
        for &count in &counts {
            let cell: Vec<&InitTrial> = trials.iter().filter(|t| t.count == count).collect();
            if cell.len() < 30 {
                log::warn!("only {} trials for count {count}; rates will be noisy", cell.len());
            }
            let successes = cell.iter().filter(|t| initialize_object(&t.observations, method, &cfg).is_ok()).count();
            cells.push(SuccessCell {
                method,
                count,
                trials: cell.len(),
                successes,
                rate: successes as f64 / cell.len().max(1) as f64,
            });
        }
    }
    cells
}

/// `scope,measurements,labeled,r_max,r_da,accuracy,coverage`
pub fn write_da_csv(path: &Path, rows: &[(String, usize, &IdCorrespondence)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scope", "measurements", "labeled", "r_max", "r_da", "accuracy", "coverage"])?;
    for (scope, n, c) in rows {
        w.write_record([
            scope.clone(),
            n.to_string(),
            c.labeled.to_string(),
            c.r_max.to_string(),
            c.r_da.to_string(),
            format!("{:.6}", c.accuracy),
            format!("{:.6}", c.coverage),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `scope,pairs,skipped,mean_error_px`; one `all` row, then one per object.
pub fn write_reproj_csv(path: &Path, r: &ReprojectionReport) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scope", "pairs", "skipped", "mean_error_px"])?;
    w.write_record(["all".to_string(), r.pairs.len().to_string(), r.skipped.to_string(), format!("{:.6}", r.mean_px)])?;
    for (id, (n, mean)) in r.per_object() {
        w.write_record([format!("object:{id}"), n.to_string(), "0".into(), format!("{mean:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

/// `method,count,trials,successes,rate`
pub fn write_init_success_csv(path: &Path, cells: &[SuccessCell]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "count", "trials", "successes", "rate"])?;
    for c in cells {
        w.write_record([
            c.method.name().to_string(),
            c.count.to_string(),
            c.trials.to_string(),
            c.successes.to_string(),
            format!("{:.4}", c.rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const DA_FILE: &str = "da.csv";
pub const REPROJ_FILE: &str = "reprojection.csv";

/// Association and map quality of one run against its dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// `(scope, measurements, correspondence)`: `all`, then `class:<id>`.
    pub association: Vec<(String, usize, IdCorrespondence)>,
    pub reprojection: Option<ReprojectionReport>,
}

impl RunMetrics {
    pub fn overall(&self) -> Option<&IdCorrespondence> {
        self.association.first().filter(|(s, _, _)| s == "all").map(|(_, _, c)| c)
    }

    /// Writes `da.csv` and, when objects were initialized, `reprojection.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        let rows: Vec<_> = self.association.iter().map(|(s, n, c)| (s.clone(), *n, c)).collect();
        write_da_csv(&dir.join(DA_FILE), &rows)?;
        if let Some(r) = &self.reprojection {
            write_reproj_csv(&dir.join(REPROJ_FILE), r)?;
        }
        Ok(())
    }
}

pub fn evaluate_run(
    dataset: &Dataset,
    records: &[AssociationRecord],
    map: &MapDatabase,
) -> Result<RunMetrics, EvalError> {
    let mut association = Vec::new();
    let (gt, assigned) = association_labels(dataset, records)?;
    association.push(("all".to_string(), gt.len(), da_accuracy(&gt, &assigned)?));
    let classes: BTreeSet<u32> = records.iter().map(|r| r.class).collect();
    for class in classes {
        let subset: Vec<AssociationRecord> = records.iter().filter(|r| r.class == class).copied().collect();
        let (gt, assigned) = association_labels(dataset, &subset)?;
        // a class whose detections all went unassigned has nothing to score
        if let Ok(c) = da_accuracy(&gt, &assigned) {
            association.push((format!("class:{class}"), gt.len(), c));
        }
    }
    let reprojection = match reprojection_error(map) {
        Ok(r) => Some(r),
        Err(EvalError::NoInitializedObjects) => None,
        Err(e) => return Err(e),
    };
    Ok(RunMetrics { association, reprojection })
}
