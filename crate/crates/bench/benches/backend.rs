use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use dqslam_bench::{ba_problem, scene};
use dqslam_core::association::{solve_assignment, ScoreMatrix};
use dqslam_core::bundle_adjustment::{optimize, CancelToken, LmConfig};
use dqslam_core::initializer::{initialize_object, InitMethod, InitializerConfig};
use dqslam_core::simulator::{init_study_trials, InitStudySpec};
use dqslam_core::vocabulary::build_vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assignment(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [5usize, 20] {
        let m = ScoreMatrix::from_entries(
            (0..n).map(|_| (0..n).map(|_| rng.gen_bool(0.7).then(|| rng.gen_range(0.0..1.0))).collect()).collect(),
        );
        c.bench_function(&format!("assignment {n}x{n}"), |b| b.iter(|| solve_assignment(black_box(&m))));
    }
}

fn bundle_adjustment(c: &mut Criterion) {
    let p = ba_problem(20, 10);
    let cfg = LmConfig::default();
    c.bench_function("ba 20 keyframes x 10 objects", |b| {
        b.iter(|| optimize(&p.graph, black_box(&p.state), &cfg, &CancelToken::new()).unwrap())
    });
}

fn initialization(c: &mut Criterion) {
    let trials = init_study_trials(&InitStudySpec { seeds: 1, counts: vec![10], ..InitStudySpec::default() });
    let cfg = InitializerConfig::default();
    for method in [InitMethod::Quadratic, InitMethod::Svd] {
        c.bench_function(&format!("init {} 10 views", method.name()), |b| {
            b.iter(|| initialize_object(black_box(&trials[0].observations), method, &cfg))
        });
    }
}

fn vocabulary(c: &mut Criterion) {
    let data = scene(20, 10);
    let docs: Vec<_> = data
        .frames
        .iter()
        .flat_map(|f| &f.detections)
        .filter(|d| d.class == 0)
        .map(|d| d.descriptors.clone())
        .collect();
    let tree = build_vocabulary(&docs, 5, 5, 0, 0).unwrap();
    c.bench_function("vocabulary transform 32 descriptors", |b| {
        b.iter_batched(|| docs[0].clone(), |d| tree.transform(&d).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, assignment, bundle_adjustment, initialization, vocabulary);
criterion_main!(benches);
