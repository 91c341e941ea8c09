//! Mapping work done per semantic keyframe: object initialization and
//! bundle adjustment, either inline or on a worker thread.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use nalgebra::{Matrix4, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::bundle_adjustment::{
    optimize_with_observer, BaReport, BaState, CancelToken, FactorGraph, IterationRecord, OdometryFactor,
    SemanticFactor,
};
use crate::geometry::quadric_from_ellipsoid;
use crate::initializer::{initialize_object, validate_quadric};

use super::config::PipelineConfig;
use super::map::{KeyframeId, MapDatabase, ObjectId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitAttempt {
    pub keyframe: KeyframeId,
    pub object: ObjectId,
    pub observations: usize,
    /// Reprojection error on success, error text otherwise.
    pub outcome: Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingReport {
    pub keyframe: KeyframeId,
    pub inits: Vec<InitAttempt>,
    pub ba: Option<BaReport>,
}

/// Try to initialize every uninitialized object with enough observations
/// that gained one after keyframe `since`. An object that failed is thus
/// retried only once new evidence arrives.
pub fn initialize_pending(
    map: &mut MapDatabase,
    keyframe: KeyframeId,
    since: Option<KeyframeId>,
    cfg: &PipelineConfig,
) -> Vec<InitAttempt> {
    let init_cfg = cfg.initializer();
    let pending: Vec<ObjectId> = map
        .objects
        .values()
        .filter(|o| o.ellipsoid.is_none() && o.observation_count as usize >= cfg.min_obs)
        .filter(|o| o.keyframes.last().is_some_and(|k| since.is_none_or(|s| *k > s)))
        .map(|o| o.id)
        .collect();
    let mut out = Vec::new();
    for id in pending {
        let obs = map.observations(id);
        let outcome = initialize_object(&obs, cfg.init_method, &init_cfg)
            .and_then(|e| {
                let err = validate_quadric(&quadric_from_ellipsoid(&e), &obs, &init_cfg)?;
                Ok((e, err))
            })
            .map_err(|e| e.to_string());
        let outcome = match outcome {
            Ok((e, err)) => {
                map.objects.get_mut(&id).unwrap().ellipsoid = Some(e);
                Ok(err)
            }
            Err(e) => Err(e),
        };
        out.push(InitAttempt { keyframe, object: id, observations: obs.len(), outcome });
    }
    out
}

/// Snapshot of the map as a least-squares problem.
#[derive(Debug, Clone)]
pub struct BaProblem {
    pub graph: FactorGraph,
    pub state: BaState,
    pub keyframes: Vec<KeyframeId>,
    pub objects: Vec<ObjectId>,
}

/// All keyframes and all initialized objects. `None` when no object is
/// initialized.
pub fn build_ba_problem(map: &MapDatabase, cfg: &PipelineConfig) -> Option<BaProblem> {
    let objects: Vec<ObjectId> = map.objects.values().filter(|o| o.ellipsoid.is_some()).map(|o| o.id).collect();
    if objects.is_empty() || map.keyframes.is_empty() {
        return None;
    }
    let keyframes: Vec<KeyframeId> = map.keyframes.keys().copied().collect();
    let kf_index = |id: KeyframeId| keyframes.binary_search(&id).ok();
    let step_cov = Matrix6::from_diagonal(&Vector6::new(
        cfg.sigma_rot.powi(2),
        cfg.sigma_rot.powi(2),
        cfg.sigma_rot.powi(2),
        cfg.sigma_trans.powi(2),
        cfg.sigma_trans.powi(2),
        cfg.sigma_trans.powi(2),
    ));
    let box_cov = Matrix4::identity() * cfg.sigma_px.powi(2);

    let mut graph = FactorGraph::default();
    for (i, kf) in map.keyframes.values().enumerate() {
        if let Some(link) = &kf.odometry {
            if let Some(from) = kf_index(link.previous) {
                graph.odometry.push(OdometryFactor {
                    from,
                    to: i,
                    measured: link.relative,
                    covariance: step_cov * link.frames.max(1) as f64,
                });
            }
        }
    }
    for (j, id) in objects.iter().enumerate() {
        for kf_id in &map.objects[id].keyframes {
            let Some(i) = kf_index(*kf_id) else { continue };
            let kf = &map.keyframes[kf_id];
            if let Some(m) = kf.measurement_for(*id) {
                graph.semantic.push(SemanticFactor {
                    keyframe: i,
                    object: j,
                    measured: m.bbox,
                    covariance: box_cov,
                    intrinsics: kf.intrinsics,
                });
            }
        }
    }
    let state = BaState {
        poses: map.keyframes.values().map(|k| k.pose).collect(),
        objects: objects.iter().map(|id| map.objects[id].ellipsoid.unwrap()).collect(),
    };
    Some(BaProblem { graph, state, keyframes, objects })
}

pub fn apply_ba(map: &mut MapDatabase, problem: &BaProblem, state: &BaState) {
    for (id, pose) in problem.keyframes.iter().zip(&state.poses) {
        if let Some(kf) = map.keyframes.get_mut(id) {
            kf.pose = *pose;
        }
    }
    for (id, e) in problem.objects.iter().zip(&state.objects) {
        if let Some(o) = map.objects.get_mut(id) {
            o.ellipsoid = Some(*e);
        }
    }
}

fn run_ba(
    problem: &BaProblem,
    cfg: &PipelineConfig,
    cancel: &CancelToken,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Option<(BaState, BaReport)> {
    match optimize_with_observer(&problem.graph, &problem.state, &cfg.lm(), cancel, observer) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("bundle adjustment skipped: {e}");
            None
        }
    }
}

/// Initialization then BA, inline on the caller's map. `since` is the
/// previously mapped keyframe.
pub fn map_keyframe(
    map: &mut MapDatabase,
    keyframe: KeyframeId,
    since: Option<KeyframeId>,
    cfg: &PipelineConfig,
    cancel: &CancelToken,
    observer: &mut dyn FnMut(&IterationRecord),
) -> MappingReport {
    let inits = initialize_pending(map, keyframe, since, cfg);
    let mut ba = None;
    if cfg.ba_enabled {
        if let Some(problem) = build_ba_problem(map, cfg) {
            if let Some((state, report)) = run_ba(&problem, cfg, cancel, observer) {
                apply_ba(map, &problem, &state);
                ba = Some(report);
            }
        }
    }
    MappingReport { keyframe, inits, ba }
}

enum Message {
    Keyframe(KeyframeId),
    Stop,
}

pub type IterationObserver = Box<dyn FnMut(&IterationRecord) + Send>;

/// Mapping thread fed through a queue. A new keyframe cancels the BA in
/// progress; its partial result (never worse than its start) is still
/// applied.
pub struct MappingWorker {
    tx: Sender<Message>,
    current: Arc<Mutex<CancelToken>>,
    handle: JoinHandle<Vec<MappingReport>>,
}

impl MappingWorker {
    pub fn spawn(map: Arc<RwLock<MapDatabase>>, cfg: PipelineConfig) -> Self {
        Self::spawn_with_observer(map, cfg, Box::new(|_| {}))
    }

    pub fn spawn_with_observer(
        map: Arc<RwLock<MapDatabase>>,
        cfg: PipelineConfig,
        observer: IterationObserver,
    ) -> Self {
        let (tx, rx) = channel();
        let current = Arc::new(Mutex::new(CancelToken::new()));
        let shared = current.clone();
        let handle = std::thread::spawn(move || worker_loop(map, cfg, rx, shared, observer));
        Self { tx, current, handle }
    }

    pub fn submit(&self, keyframe: KeyframeId) {
        self.current.lock().unwrap().cancel();
        // a send only fails once the worker is gone, which `finish` reports
        let _ = self.tx.send(Message::Keyframe(keyframe));
    }

    /// Let queued work finish and return every report.
    pub fn finish(self) -> Vec<MappingReport> {
        let _ = self.tx.send(Message::Stop);
        self.handle.join().expect("mapping worker panicked")
    }
}

fn worker_loop(
    map: Arc<RwLock<MapDatabase>>,
    cfg: PipelineConfig,
    rx: Receiver<Message>,
    current: Arc<Mutex<CancelToken>>,
    mut observer: IterationObserver,
) -> Vec<MappingReport> {
    let mut reports = Vec::new();
    let mut since = None;
    let mut stop = false;
    while !stop {
        let Ok(first) = rx.recv() else { break };
        let mut latest = match first {
            Message::Keyframe(k) => Some(k),
            Message::Stop => None,
        };
        // coalesce keyframes that queued up meanwhile
        while let Ok(m) = rx.try_recv() {
            match m {
                Message::Keyframe(k) => latest = Some(k),
                Message::Stop => stop = true,
            }
        }
        let Some(keyframe) = latest else { break };
        let token = CancelToken::new();
        *current.lock().unwrap() = token.clone();

        let inits = initialize_pending(&mut map.write().unwrap(), keyframe, since, &cfg);
        since = Some(keyframe);
        let mut ba = None;
        if cfg.ba_enabled {
            let problem = build_ba_problem(&map.read().unwrap(), &cfg);
            if let Some(problem) = problem {
                if let Some((state, report)) = run_ba(&problem, &cfg, &token, &mut *observer) {
                    apply_ba(&mut map.write().unwrap(), &problem, &state);
                    ba = Some(report);
                }
            }
        }
        reports.push(MappingReport { keyframe, inits, ba });
    }
    reports
}
