//! `dqslam` command-line driver.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use dqslam_core::evaluation::{evaluate_run, init_success_curve, write_init_success_csv};
use dqslam_core::initializer::diagnostics;
use dqslam_core::pipeline::{
    read_associations, run_dataset, train_class, MapDatabase, PipelineConfig, Vocabularies, ASSOCIATIONS_FILE, MAP_FILE,
};
use dqslam_core::simulator::{benchmark, generate, init_study_trials, Benchmark, Dataset, InitStudySpec, SceneSpec};

#[derive(Debug, Parser)]
#[command(name = "dqslam", version, about = "Object-level SLAM with dual-quadric landmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a preset name or a scene spec file.
    Simulate {
        /// `desk-easy`, `desk-hard`, or a JSON/TOML scene spec.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a class vocabulary from a dataset's detections.
    Vocab {
        /// Dataset directory.
        #[arg(long)]
        train: PathBuf,
        /// Class to train. Without it every class is trained and `--out`
        /// is a directory of `class_<id>.json` files.
        #[arg(long)]
        class: Option<u32>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        levels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the mapping pipeline over a dataset.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vocab_dir: PathBuf,
        /// Flat TOML configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run mapping inline for reproducible output.
        #[arg(long)]
        ba_sync: bool,
        /// Dump the initialization problem of every mapped object to JSON.
        #[arg(long)]
        init_diagnostics: Option<PathBuf>,
    },
    /// Score a run against its dataset's ground truth.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialization success rates of both methods on the init study.
    BenchInit {
        #[arg(long, default_value_t = 100)]
        trials: u64,
        #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
        counts: Vec<usize>,
        #[arg(long)]
        bbox_sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Bad invocation that clap cannot catch on its own.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_spec(spec: &str) -> anyhow::Result<SceneSpec> {
    if let Some(b) = benchmark(spec) {
        return match b {
            Benchmark::Scene(s) => Ok(s),
            Benchmark::InitStudy(_) => Err(usage(format!("{spec} is not a scene; use bench-init"))),
        };
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(usage(format!("{spec} is neither a preset nor an existing file")));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {spec}"))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {spec}"))?
    };
    Ok(parsed)
}

fn simulate(spec: &str, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec = load_spec(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate(&spec)?;
    data.write(out)?;
    let detections: usize = data.frames.iter().map(|f| f.detections.len()).sum();
    log::info!("{} frames, {detections} detections written to {}", data.frames.len(), out.display());
    Ok(())
}

fn vocab(train: &Path, class: Option<u32>, k: usize, levels: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    let data = Dataset::read(train)?;
    match class {
        Some(c) => {
            if !data.scene.spec.classes().contains(&c) {
                bail!("class {c} does not occur in {}", train.display());
            }
            train_class(&data, c, k, levels, seed)?.save(out)?;
        }
        None => Vocabularies::train(&data, k, levels, seed)?.save_dir(out)?,
    }
    Ok(())
}

fn run(
    dataset: &Path,
    vocab_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    ba_sync: bool,
    init_diagnostics: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.ba_sync |= ba_sync;
    let data = Dataset::read(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
    let vocabularies = Vocabularies::load_dir(vocab_dir)?;
    if vocabularies.0.is_empty() {
        bail!("no class_<id>.json vocabularies in {}", vocab_dir.display());
    }
    let result = run_dataset(&data, vocabularies, &cfg)?;
    result.write(out)?;
    let mapped = result.map.objects.values().filter(|o| o.ellipsoid.is_some()).count();
    log::info!("{} keyframes, {} objects ({mapped} mapped)", result.map.keyframes.len(), result.map.objects.len());
    if let Some(path) = init_diagnostics {
        let init_cfg = cfg.initializer();
        let dump: Vec<_> =
            result.map.objects.keys().map(|id| (id, diagnostics(&result.map.observations(*id), &init_cfg))).collect();
        std::fs::write(path, serde_json::to_string_pretty(&dump)?)?;
    }
    Ok(())
}

fn eval(run_dir: &Path, dataset: &Path, out: &Path) -> anyhow::Result<()> {
    let data = Dataset::read(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
    let map = MapDatabase::load(&run_dir.join(MAP_FILE))?;
    let log = read_associations(&run_dir.join(ASSOCIATIONS_FILE))?;
    let metrics = evaluate_run(&data, &log, &map)?;
    metrics.write(out)?;
    if let Some(c) = metrics.overall() {
        println!("da_accuracy {:.4} coverage {:.4}", c.accuracy, c.coverage);
    }
    if let Some(r) = &metrics.reprojection {
        println!("reprojection_px {:.3} over {} pairs", r.mean_px, r.pairs.len());
    }
    Ok(())
}

fn bench_init(trials: u64, counts: Vec<usize>, bbox_sigma: Option<f64>, out: &Path) -> anyhow::Result<()> {
    if trials == 0 || counts.is_empty() || counts.contains(&0) {
        return Err(usage("--trials and every --counts entry must be positive"));
    }
    let defaults = InitStudySpec::default();
    let spec =
        InitStudySpec { seeds: trials, counts, bbox_sigma: bbox_sigma.unwrap_or(defaults.bbox_sigma), ..defaults };
    let cells = init_success_curve(&init_study_trials(&spec), &Default::default());
    write_init_success_csv(out, &cells)?;
    for c in &cells {
        println!("{:<9} {:>3} {:.3}", c.method.name(), c.count, c.rate);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { spec, out, seed } => simulate(&spec, &out, seed),
        Command::Vocab { train, class, k, levels, seed, out } => vocab(&train, class, k, levels, seed, &out),
        Command::Run { dataset, vocab_dir, config, out, ba_sync, init_diagnostics } => {
            run(&dataset, &vocab_dir, config.as_deref(), &out, ba_sync, init_diagnostics.as_deref())
        }
        Command::Eval { run, dataset, out } => eval(&run, &dataset, &out),
        Command::BenchInit { trials, counts, bbox_sigma, out } => bench_init(trials, counts, bbox_sigma, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
