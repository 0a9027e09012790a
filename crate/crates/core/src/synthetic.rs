//! Deterministic synthetic benchmarks with placeholder frames on disk.
//!
//! Used by the test suites and the `epd synth` command to exercise the whole
//! pipeline offline.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ActionSegment, DatasetManifest, FrameRef, PlanningSample};
use crate::error::{Error, Result};
use crate::sampler::{sample_frames, FrameStore, SamplingPolicy};

const VERBS: &[&str] = &["pick up", "put down", "cut", "wash", "open", "close", "stir", "pour"];
const OBJECTS: &[&str] = &[
    "knife", "broccoli", "chopping board", "garlic", "pan", "spoon", "tap", "fridge", "bowl",
    "onion", "lid", "plate",
];
const GOALS: &[&str] = &[
    "Add garlic to the food and stir",
    "Prepare a vegetable stir fry",
    "Wash the dishes",
    "Make a cup of tea",
    "Chop the onions",
];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_segments: usize,
    pub n_choices: usize,
    pub seed: u64,
    pub with_gold: bool,
    pub with_narration: bool,
}

impl SyntheticSpec {
    pub fn new(n_samples: usize) -> Self {
        Self {
            n_samples,
            n_segments: 2,
            n_choices: 4,
            seed: 0,
            with_gold: true,
            with_narration: true,
        }
    }
}

fn action(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {}",
        VERBS.choose(rng).expect("verbs"),
        OBJECTS.choose(rng).expect("objects")
    )
}

pub fn synthetic_manifest(spec: &SyntheticSpec) -> DatasetManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.n_samples.max(1).to_string().len().max(4);
    let samples = (0..spec.n_samples)
        .map(|i| {
            let video_id = format!("vid{:0width$}", i / 3);
            let mut t = rng.gen_range(0..20) as f64 * 0.5;
            let segments = (0..spec.n_segments)
                .map(|index| {
                    let start = t;
                    let stop = start + rng.gen_range(1..=12) as f64 * 0.25;
                    t = stop + 0.25;
                    let narration = action(&mut rng);
                    ActionSegment {
                        index,
                        start_s: start,
                        stop_s: stop,
                        narration: spec.with_narration.then(|| {
                            let mut s = narration;
                            s.push('.');
                            s[..1].to_uppercase() + &s[1..]
                        }),
                    }
                })
                .collect();
            let mut choices: Vec<String> = Vec::with_capacity(spec.n_choices);
            while choices.len() < spec.n_choices {
                let c = action(&mut rng);
                if !choices.contains(&c) {
                    choices.push(c);
                }
            }
            let gold = rng.gen_range(0..spec.n_choices);
            PlanningSample {
                sample_id: format!("s{i:0width$}"),
                task_goal: GOALS.choose(&mut rng).expect("goals").to_string(),
                observation: FrameRef::at(&video_id, t + 0.25),
                video_id,
                segments,
                choices,
                gold: spec.with_gold.then_some(gold),
            }
        })
        .collect();
    DatasetManifest {
        name: format!("synthetic-{}", spec.n_samples),
        frame_root: PathBuf::from("frames"),
        samples,
    }
}

/// Placeholder bytes for a frame. Not a decodable JPEG; models never see
/// these, only mocks do.
pub fn placeholder_frame(video_id: &str, timestamp_s: f64) -> Vec<u8> {
    let mut bytes = vec![0xFF, 0xD8];
    bytes.extend_from_slice(format!("synthetic:{video_id}:{timestamp_s:.3}").as_bytes());
    bytes.extend_from_slice(&[0xFF, 0xD9]);
    bytes
}

/// Writes `dataset.json` and every frame the pipeline needs under `dir`.
pub fn write_synthetic(
    spec: &SyntheticSpec,
    policy: &SamplingPolicy,
    dir: &Path,
) -> Result<(PathBuf, DatasetManifest)> {
    let manifest = synthetic_manifest(spec);
    let store = FrameStore::new(dir.join(&manifest.frame_root));
    let write = |video_id: &str, t: f64| -> Result<()> {
        let path = store.frame_path(video_id, t);
        let parent = path.parent().expect("frame parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        fs::write(&path, placeholder_frame(video_id, t)).map_err(|e| Error::io(&path, e))
    };
    for s in &manifest.samples {
        for seg in &s.segments {
            for t in sample_frames(seg, policy).timestamps_s {
                write(&s.video_id, t)?;
            }
        }
        write(&s.video_id, s.observation.timestamp_s.expect("synthetic timestamps"))?;
    }
    let path = dir.join("dataset.json");
    manifest.save(&path)?;
    Ok((path, manifest))
}
