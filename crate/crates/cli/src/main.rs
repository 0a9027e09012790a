use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};

use epd::backends::BackendConfig;
use epd::dataset::{load_dataset, validate_frames};
use epd::decision::DecisionStrategy;
use epd::harness::presets::{self, EVOLUTION, INPUT_ABLATION};
use epd::harness::{
    export_predictions, load_config, run_ablation_suite, EvalOptions, EvaluationReport, Pipeline, RunConfig,
};
use epd::memory::MemoryCache;
use epd::sampler::{FrameStore, SamplingPolicy};
use epd::synthetic::{write_synthetic, SyntheticSpec};

/// Egocentric task planning: memory extraction, few-shot planning and
/// multi-run decisions, with an evaluation harness.
#[derive(Parser)]
#[command(name = "epd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract one-sentence memories for every progress segment.
    ExtractMemory(ExtractArgs),
    /// Plan every sample with a single backend under a preset's prompt.
    Plan(PlanArgs),
    /// Run a full evaluation from a config file.
    Evaluate(EvaluateArgs),
    /// Evaluate several presets and tabulate accuracy deltas.
    Ablate(AblateArgs),
    /// Write the sorted prediction list from a report.
    Export(ExportArgs),
    /// List frames that are not on disk.
    ValidateFrames(ValidateArgs),
    /// Rewrite a memory journal with one line per key.
    CompactMemory {
        #[arg(long)]
        cache: PathBuf,
    },
    /// Write a synthetic dataset with placeholder frames.
    Synth(SynthArgs),
    /// List the shipped presets.
    Presets,
}

/// Options shared by commands that take a dataset and one backend.
#[derive(Args)]
struct DatasetBackend {
    #[arg(long)]
    dataset: PathBuf,
    /// Backend name from --config, or a built-in kind such as `oracle-mock`.
    #[arg(long)]
    backend: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; `epd-run` unless the config names one.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    common: DatasetBackend,
    /// Memory journal; defaults to memory.jsonl in the output directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: DatasetBackend,
    #[arg(long, default_value = presets::DEFAULT_PRESET)]
    preset: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated preset names.
    #[arg(long, value_delimiter = ',', conflicts_with = "suite")]
    presets: Vec<String>,
    /// `evolution` or `inputs`.
    #[arg(long, default_value = "evolution")]
    suite: String,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "predictions.json")]
    output: PathBuf,
    #[arg(long, default_value_t = 'A')]
    fallback: char,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    frame_root: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    segments: usize,
    #[arg(long, default_value_t = 4)]
    choices: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_gold: bool,
}

/// Exit status: 0 done, 1 fatal, 2 finished with per-sample failures.
enum Status {
    Done,
    Partial,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::ExtractMemory(args) => extract(args),
        Command::Plan(args) => plan(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Ablate(args) => ablate(args),
        Command::Export(args) => {
            let report = EvaluationReport::load(&args.report)?;
            export_predictions(&report, args.fallback, &args.output)?;
            println!("wrote {} predictions to {}", report.per_sample.len(), args.output.display());
            Ok(Status::Done)
        }
        Command::ValidateFrames(args) => validate(args),
        Command::CompactMemory { cache } => {
            let n = MemoryCache::open(&cache)?.compact()?;
            println!("{}: {n} entries", cache.display());
            Ok(Status::Done)
        }
        Command::Synth(args) => {
            let spec = SyntheticSpec {
                n_segments: args.segments,
                n_choices: args.choices,
                seed: args.seed,
                with_gold: !args.no_gold,
                ..SyntheticSpec::new(args.samples)
            };
            let (path, m) = write_synthetic(&spec, &SamplingPolicy::default(), &args.out)?;
            println!("wrote {} samples to {}", m.samples.len(), path.display());
            Ok(Status::Done)
        }
        Command::Presets => {
            for p in presets::catalog() {
                println!("{:<20} {}", p.name, p.description);
            }
            for (alias, target) in presets::ALIASES {
                println!("{alias:<20} alias of {target}");
            }
            Ok(Status::Done)
        }
    }
}

/// A config for one dataset and one backend, from a file or from defaults.
fn single_backend_config(args: &DatasetBackend) -> anyhow::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::new(&args.dataset, "epd-run"),
    };
    config.dataset = args.dataset.clone();
    if let Some(o) = &args.output {
        config.output_dir = o.clone();
    }
    if let Some(c) = args.concurrency {
        config.concurrency = c;
    }
    if !config.backends.contains_key(&args.backend) {
        if epd::backends::backend_kinds().contains(&args.backend) {
            config.backends.insert(args.backend.clone(), BackendConfig::of_kind(&args.backend));
        } else {
            bail!(
                "backend `{}` is neither configured nor a built-in kind ({})",
                args.backend,
                epd::backends::backend_kinds().names().join(", ")
            );
        }
    }
    config.memory_backend = args.backend.clone();
    config.validate()?;
    Ok(config)
}

fn extract(args: ExtractArgs) -> anyhow::Result<Status> {
    let mut config = single_backend_config(&args.common)?;
    if let Some(cache) = args.cache {
        config.memory_cache = Some(cache);
    }
    config.strategy = Some(DecisionStrategy::single(&args.common.backend));
    let cache_path = config.memory_cache_path();
    let pipeline = Pipeline::new(config)?;
    let stats = pipeline.extract_memory_all()?;
    println!(
        "{} samples, {} memory entries in {}",
        stats.samples,
        stats.entries,
        cache_path.display()
    );
    for (id, e) in &stats.failures {
        eprintln!("{id}: {e}");
    }
    Ok(if stats.failures.is_empty() { Status::Done } else { Status::Partial })
}

fn plan(args: PlanArgs) -> anyhow::Result<Status> {
    let mut config = single_backend_config(&args.common)?;
    let preset = presets::presets().get(&args.preset)?;
    config.preset = args.preset.clone();
    config.template = Some(preset.template.clone());
    config.strategy = Some(DecisionStrategy::single(&args.common.backend));
    finish(Pipeline::new(config)?.run(None)?)
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<Status> {
    let mut config = load_config(&args.config)?;
    if let Some(p) = args.preset {
        config.preset = p;
    }
    if let Some(o) = args.output {
        config.output_dir = o;
    }
    if let Some(c) = args.concurrency {
        config.concurrency = c;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    finish(Pipeline::new(config)?.run(None)?)
}

fn finish(report: EvaluationReport) -> anyhow::Result<Status> {
    let accuracy = report
        .accuracy_pct
        .map(|p| format!("{p}%"))
        .unwrap_or_else(|| "n/a (no gold labels)".into());
    println!(
        "{}: {} samples, {} answered, {} failed, accuracy {accuracy}",
        report.preset, report.n_samples, report.n_answered, report.n_failed
    );
    Ok(if report.n_failed == 0 { Status::Done } else { Status::Partial })
}

fn ablate(args: AblateArgs) -> anyhow::Result<Status> {
    let mut config = load_config(&args.config)?;
    if let Some(o) = args.output {
        config.output_dir = o;
    }
    let names: Vec<&str> = if !args.presets.is_empty() {
        args.presets.iter().map(String::as_str).collect()
    } else {
        match args.suite.as_str() {
            "evolution" => EVOLUTION.to_vec(),
            "inputs" => INPUT_ABLATION.to_vec(),
            other => bail!("unknown suite `{other}` (evolution, inputs)"),
        }
    };
    let table = run_ablation_suite(&config, &names, &EvalOptions::default())?;
    print!("{}", table.to_markdown());
    let partial = table.rows.iter().any(|r| r.error.is_some() || r.n_failed > 0);
    Ok(if partial { Status::Partial } else { Status::Done })
}

fn validate(args: ValidateArgs) -> anyhow::Result<Status> {
    let manifest = load_dataset(&args.dataset)?;
    let root = match args.frame_root {
        Some(r) => r,
        None => dataset_dir(&args.dataset).join(&manifest.frame_root),
    };
    let store = FrameStore::new(&root);
    let missing = validate_frames(&manifest, &store, &SamplingPolicy::default());
    for f in &missing {
        println!("{f}");
    }
    if missing.is_empty() {
        println!("all frames present under {}", root.display());
        Ok(Status::Done)
    } else {
        eprintln!("{} frames missing under {}", missing.len(), root.display());
        Ok(Status::Partial)
    }
}

fn dataset_dir(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}
