#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use epd::backends::oracle::OracleBehavior;
use epd::backends::BackendConfig;
use epd::dataset::DatasetManifest;
use epd::harness::RunConfig;
use epd::sampler::SamplingPolicy;
use epd::synthetic::{write_synthetic, SyntheticSpec};

pub fn synth(dir: &Path, n: usize, seed: u64) -> (PathBuf, DatasetManifest) {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::new(n)
    };
    write_synthetic(&spec, &SamplingPolicy::default(), dir).unwrap()
}

/// `gpt` and `claude` both backed by the oracle.
pub fn oracle_config(dataset: &Path, out: &Path, behavior: OracleBehavior) -> RunConfig {
    RunConfig::new(dataset, out)
        .with_backend("gpt", BackendConfig::oracle(behavior))
        .with_backend("claude", BackendConfig::oracle(behavior))
}

/// Writes a fixture map answering every sample's planning call with the
/// letter `pick(sample_index, gold)`.
pub fn plan_fixtures(
    manifest: &DatasetManifest,
    path: &Path,
    pick: impl Fn(usize, usize) -> usize,
) -> BackendConfig {
    let mut map = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        let gold = s.gold.unwrap_or(0);
        let letter = epd::dataset::PlanningSample::letter(pick(i, gold));
        map.insert(
            format!("plan/{}", s.sample_id),
            format!("Observation: a kitchen.\nReasoning: it fits.\nAnswer: ({letter})"),
        );
    }
    fs::write(path, serde_json::to_string_pretty(&map).unwrap()).unwrap();
    BackendConfig {
        default_response: Some("The camera wearer picks up a knife.".into()),
        ..BackendConfig::fixture(path)
    }
}

use epd::backends::ModelRequest;
use epd::dataset::{ActionSegment, FrameRef, PlanningSample};
use epd::harness::presets::presets;
use epd::memory::MemoryEntry;
use epd::planner::{default_shots, PlanningPrompt};
use epd::sampler::Image;

/// The fixed question every prompt golden is built from.
pub fn golden_sample() -> PlanningSample {
    PlanningSample {
        sample_id: "golden-0001".into(),
        task_goal: "Add garlic to the food and stir".into(),
        video_id: "kitchen-07".into(),
        segments: vec![
            ActionSegment { index: 0, start_s: 12.0, stop_s: 15.0, narration: None },
            ActionSegment { index: 1, start_s: 15.5, stop_s: 19.25, narration: None },
        ],
        observation: FrameRef::at("kitchen-07", 20.0),
        choices: vec![
            "pick up chopping board".into(),
            "add garlic to food".into(),
            "stir food".into(),
            "wash hands".into(),
        ],
        gold: Some(1),
    }
}

pub fn golden_memory(sample: &PlanningSample) -> Vec<MemoryEntry> {
    ["The camera wearer peels the garlic.", "The camera wearer chops the garlic on the board."]
        .iter()
        .zip(&sample.segments)
        .map(|(s, seg)| MemoryEntry {
            video_id: sample.video_id.clone(),
            segment_index: seg.index,
            start_s: seg.start_s,
            stop_s: seg.stop_s,
            sentence: s.to_string(),
            model_id: "gpt".into(),
            prompt_version: "memory-v1".into(),
            created_at: "2024-01-01T00:00:00Z".into(),
        })
        .collect()
}

fn golden_image(label: &str) -> Image {
    Image::new(format!("golden-frame:{label}").into_bytes(), "image/jpeg")
}

/// The planning request `preset` builds for [`golden_sample`].
pub fn golden_request(preset: &str) -> ModelRequest {
    let preset = presets().get(preset).unwrap();
    let sample = golden_sample();
    let memory = golden_memory(&sample);
    let mut shots = default_shots();
    shots.truncate(preset.template.example_slots);
    let observation = golden_image("observation");
    let progress: Vec<Vec<Image>> = (0..sample.segments.len())
        .map(|s| (0..4).map(|f| golden_image(&format!("seg{s}-f{f}"))).collect())
        .collect();
    PlanningPrompt {
        sample: &sample,
        memory: &memory,
        shots: &shots,
        template: &preset.template,
        observation: &observation,
        progress_frames: preset.template.include_progress_frames.then_some(progress.as_slice()),
    }
    .build("gpt-4o", None)
    .unwrap()
}

pub const GOLDEN_PRESETS: [&str; 4] = ["zero-shot", "four-shot", "high-res-describe", "with-progress-frames"];

/// Compares against `tests/golden/{preset}.json`; `UPDATE_GOLDEN=1`
/// rewrites the file instead.
pub fn check_golden(preset: &str) -> Result<(), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{preset}.json"));
    let actual = serde_json::to_string_pretty(&golden_request(preset)).unwrap() + "\n";
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &actual).unwrap();
        return Ok(());
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .unwrap_or(expected.lines().count().min(actual.lines().count()));
        Err(format!("{preset}: golden differs from line {}", line + 1))
    }
}

#[derive(serde::Deserialize)]
pub struct ParseCase {
    pub id: String,
    pub category: String,
    pub text: String,
    pub choices: Vec<String>,
    pub expected: Option<usize>,
}

pub fn parse_corpus() -> Vec<ParseCase> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/parse_corpus.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Distinct memory keys the dataset needs: samples sharing a video may
/// share segments.
pub fn distinct_segments(manifest: &DatasetManifest) -> usize {
    let mut keys: Vec<(String, usize, u64, u64)> = manifest
        .samples
        .iter()
        .flat_map(|s| {
            s.segments.iter().map(|g| {
                (s.video_id.clone(), g.index, (g.start_s * 1000.0).round() as u64, (g.stop_s * 1000.0).round() as u64)
            })
        })
        .collect();
    keys.sort();
    keys.dedup();
    keys.len()
}
