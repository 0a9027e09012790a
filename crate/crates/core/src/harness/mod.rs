//! End-to-end evaluation over a dataset, with resumable journals and reports.
//!
//! An output directory holds:
//!
//! - `run.json`: the config fingerprint the directory belongs to
//! - `memory.jsonl`: extracted memory sentences (unless configured elsewhere)
//! - `transcripts.jsonl`: every planning transcript
//! - `results.jsonl`: one [`SampleResult`] per finished sample
//! - `report.json`, `summary.csv`, `predictions.json`: written at the end
//!
//! Samples already in `results.jsonl` are skipped, so re-running an
//! interrupted evaluation finishes it.

pub mod ablation;
pub mod config;
pub mod presets;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{build_backend, Backend, BuildContext};
use crate::dataset::{load_dataset, validate_frames, DatasetManifest, PlanningSample};
use crate::decision::{decide, DecisionContext, DecisionOutcome, DecisionStrategy, JudgeTemplate};
use crate::digest::{canonical_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::memory::{extract_memory, terminate_torn_line, MemoryCache, MemoryTemplate};
use crate::planner::{default_shots, load_shots, FewShotExample, Planner, PromptTemplate, TranscriptJournal};
use crate::sampler::{FrameStore, SamplingPolicy};

pub use ablation::{run_ablation_suite, AblationRow, AblationTable};
pub use config::{load_config, RunConfig};
pub use presets::{presets, Preset};
pub use report::{compute_accuracy, export_predictions, EvaluationReport, Percent, SampleResult};

pub const RUN_META: &str = "run.json";
pub const RESULTS_JOURNAL: &str = "results.jsonl";
pub const TRANSCRIPTS_JOURNAL: &str = "transcripts.jsonl";
pub const REPORT: &str = "report.json";
pub const PREDICTIONS: &str = "predictions.json";

#[derive(Clone, Default)]
pub struct EvalOptions {
    /// Used in place of the config entry of the same name.
    pub backends: HashMap<String, Arc<dyn Backend>>,
    /// Stop dispatching after this many newly finished samples and return
    /// [`Error::Interrupted`], as if the process had been killed.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    config_fingerprint: String,
    preset: String,
    dataset: String,
}

#[derive(Serialize)]
struct Fingerprint<'a> {
    dataset_digest: String,
    preset: &'a str,
    template: &'a PromptTemplate,
    strategy: &'a DecisionStrategy,
    memory_template: &'a MemoryTemplate,
    judge_template: &'a JudgeTemplate,
    shots: &'a [FewShotExample],
    sampling: &'a SamplingPolicy,
    seed: u64,
    memory_backend: &'a str,
    fallback_letter: char,
    backends: BTreeMap<&'a str, Value>,
}

/// Summary of a memory-only pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryStats {
    pub samples: usize,
    pub entries: usize,
    /// `(sample_id, error)` for samples whose extraction failed.
    pub failures: Vec<(String, String)>,
}

/// A validated run: dataset loaded, preset resolved, backends built.
pub struct Pipeline {
    pub config: RunConfig,
    pub manifest: DatasetManifest,
    pub preset: Preset,
    pub template: PromptTemplate,
    pub strategy: DecisionStrategy,
    pub memory_template: MemoryTemplate,
    pub judge_template: JudgeTemplate,
    pub shots: Vec<FewShotExample>,
    pub store: FrameStore,
    pub backends: HashMap<String, Arc<dyn Backend>>,
    fingerprint: String,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        Self::with_backends(config, &HashMap::new())
    }

    /// Everything that can make the run fail as a whole is checked here,
    /// before any backend is called.
    pub fn with_backends(config: RunConfig, injected: &HashMap<String, Arc<dyn Backend>>) -> Result<Self> {
        config.validate()?;
        let manifest = load_dataset(&config.dataset)?;
        let preset = presets().get(&config.preset)?.as_ref().clone();
        let template = config.template.clone().unwrap_or_else(|| preset.template.clone());
        let strategy = config.strategy.clone().unwrap_or_else(|| preset.strategy.clone());
        strategy.validate()?;
        let memory_template = config.memory_template.clone().unwrap_or_default();
        let judge_template = config.judge_template.clone().unwrap_or_default();

        let shots = if template.example_slots == 0 {
            Vec::new()
        } else {
            let mut all = match &config.shots_file {
                Some(path) => load_shots(path)?,
                None => default_shots(),
            };
            if all.len() < template.example_slots {
                return Err(Error::Config(format!(
                    "template wants {} worked examples but only {} are available",
                    template.example_slots,
                    all.len()
                )));
            }
            all.truncate(template.example_slots);
            all
        };

        let mut needed: Vec<&str> = strategy.backend_names();
        needed.push(&config.memory_backend);
        needed.sort_unstable();
        needed.dedup();
        let ctx = BuildContext {
            base_dir: &config.base_dir,
            manifest: Some(&manifest),
        };
        let mut backends = HashMap::new();
        let mut described = BTreeMap::new();
        for name in needed {
            let backend = if let Some(b) = injected.get(name) {
                described.insert(
                    name,
                    serde_json::json!({"injected": b.id(), "model": b.model_id()}),
                );
                b.clone()
            } else if let Some(bc) = config.backends.get(name) {
                described.insert(name, serde_json::to_value(bc).expect("backend config serializes"));
                build_backend(name, bc, ctx)?
            } else {
                return Err(Error::Config(format!(
                    "backend `{name}` is needed by preset `{}` but not configured",
                    config.preset
                )));
            };
            backends.insert(name.to_string(), backend);
        }

        let frame_root = match &config.frame_root {
            Some(root) => root.clone(),
            None if manifest.frame_root.is_relative() => config
                .dataset
                .parent()
                .unwrap_or(Path::new("."))
                .join(&manifest.frame_root),
            None => manifest.frame_root.clone(),
        };
        let mut store = FrameStore::new(frame_root).with_snap_tolerance(config.snap_tolerance_s);
        match &config.extractor_command {
            Some(cmd) => store = store.with_extractor(cmd.clone()),
            None => {
                let missing = validate_frames(&manifest, &store, &config.sampling);
                if let Some(first) = missing.first() {
                    return Err(Error::Config(format!(
                        "{} frames are missing under {} (first: {first}) and no extractor_command is set",
                        missing.len(),
                        store.root().display()
                    )));
                }
            }
        }

        let fingerprint = canonical_digest(&Fingerprint {
            dataset_digest: sha256_hex(manifest.to_json().as_bytes()),
            preset: &config.preset,
            template: &template,
            strategy: &strategy,
            memory_template: &memory_template,
            judge_template: &judge_template,
            shots: &shots,
            sampling: &config.sampling,
            seed: config.seed,
            memory_backend: &config.memory_backend,
            fallback_letter: config.fallback_letter,
            backends: described,
        });

        Ok(Self {
            config,
            manifest,
            preset,
            template,
            strategy,
            memory_template,
            judge_template,
            shots,
            store,
            backends,
            fingerprint,
        })
    }

    /// Digest of everything that determines the results.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn output_path(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn prepare_output_dir(&self) -> Result<()> {
        let dir = &self.config.output_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = self.output_path(RUN_META);
        if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: RunMeta =
                serde_json::from_str(&text).map_err(|e| Error::json(meta_path.display().to_string(), e))?;
            if meta.config_fingerprint != self.fingerprint {
                return Err(Error::Config(format!(
                    "{} belongs to a different configuration (preset `{}`); use a fresh output_dir",
                    dir.display(),
                    meta.preset
                )));
            }
            return Ok(());
        }
        let meta = RunMeta {
            config_fingerprint: self.fingerprint.clone(),
            preset: self.config.preset.clone(),
            dataset: self.manifest.name.clone(),
        };
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    fn backend(&self, name: &str) -> &dyn Backend {
        self.backends[name].as_ref()
    }

    /// Memory then decision for one sample.
    pub fn answer(
        &self,
        sample: &PlanningSample,
        cache: &MemoryCache,
        journal: Option<&TranscriptJournal>,
    ) -> Result<DecisionOutcome> {
        let memory = extract_memory(
            sample,
            self.backend(&self.config.memory_backend),
            &self.store,
            &self.config.sampling,
            cache,
            &self.memory_template,
        )?;
        let ctx = DecisionContext {
            planner: Planner {
                template: &self.template,
                shots: &self.shots,
                store: &self.store,
                policy: &self.config.sampling,
                journal,
            },
            backends: &self.backends,
            judge_template: &self.judge_template,
            seed: self.config.seed,
        };
        decide(sample, &memory, &self.strategy, &ctx)
    }

    /// Runs one sample; failures end up in the result, never as `Err`.
    pub fn run_sample(
        &self,
        sample: &PlanningSample,
        cache: &MemoryCache,
        journal: Option<&TranscriptJournal>,
    ) -> SampleResult {
        let start = Instant::now();
        let mut result = SampleResult::new(sample);
        match self.answer(sample, cache, journal) {
            Ok(outcome) => {
                result.answer(outcome.final_index);
                result.transcripts = outcome.inputs;
                result.tie_broken = outcome.tie_broken;
                result.judge_called = outcome.judge_called;
                result.prompt_tokens = outcome.prompt_tokens;
                result.completion_tokens = outcome.completion_tokens;
                result.warnings = outcome.notes;
            }
            Err(e) => {
                log::warn!("sample {}: {e}", sample.sample_id);
                result.errors.push(e.to_string());
            }
        }
        result.latency_ms = start.elapsed().as_millis() as u64;
        result
    }

    /// Evaluates every sample not yet in the results journal, then writes
    /// the report files.
    pub fn run(&self, stop_after: Option<usize>) -> Result<EvaluationReport> {
        self.prepare_output_dir()?;
        let started_at = chrono::Utc::now().to_rfc3339();
        let clock = Instant::now();

        let results_path = self.output_path(RESULTS_JOURNAL);
        let mut done = read_results(&results_path)?;
        done.retain(|id, _| self.manifest.get(id).is_some());
        let pending: Vec<&PlanningSample> = self
            .manifest
            .samples
            .iter()
            .filter(|s| !done.contains_key(&s.sample_id))
            .collect();
        if !done.is_empty() {
            log::info!("resuming: {} done, {} to go", done.len(), pending.len());
        }

        let cache = MemoryCache::open(self.config.memory_cache_path())?;
        let journal = TranscriptJournal::open(self.output_path(TRANSCRIPTS_JOURNAL))?;
        let mut out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&results_path)
            .map_err(|e| Error::io(&results_path, e))?;
        terminate_torn_line(&results_path, &mut out)?;

        let stopped = self.fan_out(&pending, &cache, &journal, stop_after, |result| {
            append_result(&mut out, &results_path, &result)?;
            done.insert(result.sample_id.clone(), result);
            Ok(())
        })?;
        if let Some(completed) = stopped {
            return Err(Error::Interrupted { completed });
        }

        let mut report = EvaluationReport::assemble(
            self.fingerprint.clone(),
            self.manifest.name.clone(),
            self.config.preset.clone(),
            done.into_values().collect(),
        );
        report.started_at = started_at;
        report.finished_at = chrono::Utc::now().to_rfc3339();
        report.wall_time_ms = clock.elapsed().as_millis() as u64;
        report.save(&self.config.output_dir)?;
        export_predictions(&report, self.config.fallback_letter, &self.output_path(PREDICTIONS))?;
        Ok(report)
    }

    /// Bounded worker pool over `pending`; `sink` runs on the calling thread
    /// only. Returns `Some(n)` when stopped early after `n` results.
    fn fan_out(
        &self,
        pending: &[&PlanningSample],
        cache: &MemoryCache,
        journal: &TranscriptJournal,
        stop_after: Option<usize>,
        mut sink: impl FnMut(SampleResult) -> Result<()>,
    ) -> Result<Option<usize>> {
        if pending.is_empty() {
            return Ok(None);
        }
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let workers = self.config.concurrency.min(pending.len());
        let (tx, rx) = mpsc::channel::<SampleResult>();
        let mut written = 0usize;
        let mut failure = None;
        thread::scope(|s| {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, stop) = (&next, &stop);
                s.spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(sample) = pending.get(i) else { break };
                        if tx.send(self.run_sample(sample, cache, Some(journal))).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(tx);
            for result in rx {
                if stop.load(Ordering::SeqCst) {
                    continue;
                }
                if let Err(e) = sink(result) {
                    failure = Some(e);
                    stop.store(true, Ordering::SeqCst);
                    continue;
                }
                written += 1;
                if stop_after.is_some_and(|n| written >= n) && written < pending.len() {
                    stop.store(true, Ordering::SeqCst);
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(stop.load(Ordering::SeqCst).then_some(written))
    }

    /// Fills the memory journal for every sample without planning.
    pub fn extract_memory_all(&self) -> Result<MemoryStats> {
        let cache = MemoryCache::open(self.config.memory_cache_path())?;
        let samples: Vec<&PlanningSample> = self.manifest.samples.iter().collect();
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel();
        let workers = self.config.concurrency.min(samples.len()).max(1);
        let memory_backend = self.backend(&self.config.memory_backend);
        thread::scope(|s| {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, samples, cache) = (&next, &samples, &cache);
                s.spawn(move || {
                    while let Some(sample) = samples.get(next.fetch_add(1, Ordering::SeqCst)) {
                        let r = extract_memory(
                            sample,
                            memory_backend,
                            &self.store,
                            &self.config.sampling,
                            cache,
                            &self.memory_template,
                        );
                        if tx.send((sample.sample_id.clone(), r)).is_err() {
                            break;
                        }
                    }
                });
            }
        });
        drop(tx);
        let mut stats = MemoryStats::default();
        for (id, r) in rx {
            stats.samples += 1;
            match r {
                Ok(entries) => stats.entries += entries.len(),
                Err(e) => stats.failures.push((id, e.to_string())),
            }
        }
        stats.failures.sort();
        Ok(stats)
    }
}

fn append_result(out: &mut File, path: &Path, result: &SampleResult) -> Result<()> {
    let mut line = serde_json::to_string(result).expect("result serializes");
    line.push('\n');
    out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Finished results keyed by sample id; a torn final line is ignored.
pub fn read_results(path: &Path) -> Result<BTreeMap<String, SampleResult>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SampleResult>(line) {
            Ok(r) => {
                out.insert(r.sample_id.clone(), r);
            }
            Err(e) => log::warn!("{}:{}: skipping unreadable result: {e}", path.display(), n + 1),
        }
    }
    Ok(out)
}

pub fn evaluate(config: RunConfig) -> Result<EvaluationReport> {
    evaluate_with(config, &EvalOptions::default())
}

pub fn evaluate_with(config: RunConfig, options: &EvalOptions) -> Result<EvaluationReport> {
    Pipeline::with_backends(config, &options.backends)?.run(options.stop_after)
}
