mod common;

use std::collections::HashMap;
use std::sync::Arc;

use common::{check_golden, golden_memory, golden_request, golden_sample, parse_corpus, GOLDEN_PRESETS};
use epd::backends::fixture::FixtureBackend;
use epd::backends::{Part, Role};
use epd::planner::{default_shots, parse_answer, ParseMethod, PlanRun, Planner, PromptTemplate, TranscriptJournal};
use epd::sampler::{FrameStore, SamplingPolicy};
use epd::synthetic::{write_synthetic, SyntheticSpec};
use epd::Error;

#[test]
fn prompts_match_goldens() {
    for preset in GOLDEN_PRESETS {
        check_golden(preset).unwrap();
    }
}

#[test]
fn prompt_shapes_per_preset() {
    let zero = golden_request("zero-shot");
    // system + query only
    assert_eq!(zero.messages.len(), 2);
    assert_eq!(zero.image_count(), 1);
    let four = golden_request("four-shot");
    assert_eq!(four.messages.len(), 2 + 2 * 4);
    assert!(four.messages[1..9].chunks(2).all(|p| p[0].role == Role::User && p[1].role == Role::Assistant));
    let hires = golden_request("high-res-describe");
    let query = hires.messages.last().unwrap().text();
    assert!(query.contains("Observation:"), "{query}");
    assert!(!four.messages.last().unwrap().text().contains("Observation:"));
    let frames = golden_request("with-progress-frames");
    assert_eq!(frames.image_count(), 1 + 2 * 4);
}

#[test]
fn prompt_is_deterministic_and_choice_order_only_moves_labels() {
    assert_eq!(golden_request("four-shot").digest(), golden_request("four-shot").digest());
    let text = golden_request("zero-shot").messages.last().unwrap().text();
    assert!(text.contains("(B) add garlic to food"), "{text}");
    assert!(text.contains("1. The camera wearer peels the garlic."));
}

#[test]
fn observation_image_carries_detail_hint() {
    let high = golden_request("high-res-describe");
    let low = golden_request("four-shot");
    let detail = |r: &epd::backends::ModelRequest| {
        r.messages
            .last()
            .unwrap()
            .parts
            .iter()
            .find_map(|p| match p {
                Part::Image { detail, .. } => Some(*detail),
                _ => None,
            })
            .unwrap()
    };
    assert_eq!(detail(&high), epd::sampler::Detail::High);
    assert_eq!(detail(&low), epd::sampler::Detail::Low);
}

#[test]
fn parse_corpus_matches_labels() {
    let corpus = parse_corpus();
    assert_eq!(corpus.len(), 200);
    let mut wrong = Vec::new();
    for case in &corpus {
        let got = parse_answer(&case.text, &case.choices);
        if got.index != case.expected {
            wrong.push(format!("{} [{}] {:?}: got {:?}", case.id, case.category, case.text, got.index));
        }
        if case.expected.is_none() {
            assert_eq!(got.method, ParseMethod::None);
        }
    }
    assert!(wrong.is_empty(), "{}", wrong.join("\n"));
}

fn offline_store(dir: &std::path::Path) -> (epd::dataset::DatasetManifest, FrameStore) {
    let (_, m) = write_synthetic(&SyntheticSpec::new(3), &SamplingPolicy::default(), dir).unwrap();
    let store = FrameStore::new(dir.join(&m.frame_root));
    (m, store)
}

#[test]
fn plan_reasks_once_then_gives_up() {
    let dir = tempfile::tempdir().unwrap();
    let (m, store) = offline_store(dir.path());
    let sample = &m.samples[0];
    let template = PromptTemplate::default();
    let shots = default_shots();
    let policy = SamplingPolicy::default();
    let journal = TranscriptJournal::open(dir.path().join("t.jsonl")).unwrap();
    let planner = Planner {
        template: &template,
        shots: &shots,
        store: &store,
        policy: &policy,
        journal: Some(&journal),
    };
    let id = &sample.sample_id;

    // prose with "(A)" embedded
    let fx = FixtureBackend::new(
        "gpt",
        HashMap::from([(format!("plan/{id}"), "I pick (A) since it fits.".to_string())]),
    );
    let t = planner.plan(sample, &[], &fx, &PlanRun::greedy("r")).unwrap();
    assert_eq!(t.answer.index, Some(0));
    assert!(t.reask_text.is_none());

    // garbage first, letter on the re-ask
    let fx = FixtureBackend::new(
        "gpt",
        HashMap::from([
            (format!("plan/{id}/r/0"), "Hmm, hard to say.".to_string()),
            (format!("plan/{id}/r/1"), "C".to_string()),
        ]),
    );
    let t = planner.plan(sample, &[], &fx, &PlanRun::greedy("r")).unwrap();
    assert_eq!(t.answer.index, Some(2));
    assert_eq!(t.reask_text.as_deref(), Some("C"));
    assert_eq!(fx.calls(), 2);

    // garbage twice
    let fx = FixtureBackend::new("gpt", HashMap::new()).with_default("no idea");
    let err = planner.plan(sample, &[], &fx, &PlanRun::greedy("r")).unwrap_err();
    assert!(matches!(err, Error::UnparseableAfterRetry(ref s) if s == id));
    assert_eq!(fx.calls(), 2);

    let logged = TranscriptJournal::read_all(&dir.path().join("t.jsonl")).unwrap();
    assert_eq!(logged.len(), 3);
    assert!(logged[2].answer.is_failure());
}

#[test]
fn missing_observation_frame_is_annotated() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = offline_store(dir.path());
    let store = FrameStore::new(dir.path().join("empty"));
    let template = PromptTemplate::default();
    let shots = default_shots();
    let policy = SamplingPolicy::default();
    let planner = Planner { template: &template, shots: &shots, store: &store, policy: &policy, journal: None };
    let fx = Arc::new(FixtureBackend::new("gpt", HashMap::new()).with_default("(A)"));
    let err = planner.plan(&m.samples[1], &[], fx.as_ref(), &PlanRun::greedy("r")).unwrap_err();
    assert!(err.to_string().contains(&m.samples[1].sample_id), "{err}");
    assert_eq!(fx.calls(), 0);
    let _ = (golden_sample(), golden_memory(&golden_sample()));
}
