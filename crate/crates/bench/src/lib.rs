//! Fixtures shared by the criterion benches.

use dqslam_core::pipeline::mapping::{build_ba_problem, BaProblem};
use dqslam_core::pipeline::{run_dataset, PipelineConfig, Vocabularies};
use dqslam_core::simulator::{desk_hard, generate, Dataset, Trajectory};

/// A `desk-hard` scene cut down to `objects` objects and `4 * keyframes`
/// frames over one orbit.
pub fn scene(keyframes: usize, objects: usize) -> Dataset {
    let mut spec = desk_hard();
    spec.objects.truncate(objects);
    if let Trajectory::Orbit { frames, .. } = &mut spec.trajectory {
        *frames = 4 * keyframes;
    }
    generate(&spec).expect("scene generates")
}

/// BA problem at its initialization state: the pipeline runs with BA off.
pub fn ba_problem(keyframes: usize, objects: usize) -> BaProblem {
    let data = scene(keyframes, objects);
    let vocab = Vocabularies::train(&data, 8, 3, 0).expect("vocabulary trains");
    let cfg = PipelineConfig { ba_enabled: false, ba_sync: true, min_obs: 5, ..PipelineConfig::default() };
    let run = run_dataset(&data, vocab, &cfg).expect("run completes");
    build_ba_problem(&run.map, &cfg).expect("objects initialize")
}
