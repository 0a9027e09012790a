mod common;

use std::collections::HashMap;
use std::sync::Arc;

use common::synth;
use epd::backends::fixture::FixtureBackend;
use epd::backends::oracle::{OracleBackend, OracleBehavior};
use epd::backends::{Backend, CountingBackend};
use epd::dataset::DatasetManifest;
use epd::decision::{decide, DecisionContext, DecisionStrategy, JudgeTemplate};
use epd::planner::{PromptTemplate, Planner};
use epd::sampler::{FrameStore, SamplingPolicy};
use epd::Error;

struct Env {
    _dir: tempfile::TempDir,
    manifest: DatasetManifest,
    store: FrameStore,
    template: PromptTemplate,
    policy: SamplingPolicy,
    judge: JudgeTemplate,
}

fn env(n: usize) -> Env {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = synth(dir.path(), n, 21);
    let store = FrameStore::new(dir.path().join(&manifest.frame_root));
    Env {
        _dir: dir,
        manifest,
        store,
        template: PromptTemplate { example_slots: 0, ..PromptTemplate::default() },
        policy: SamplingPolicy::default(),
        judge: JudgeTemplate::default(),
    }
}

impl Env {
    fn ctx<'a>(&'a self, backends: &'a HashMap<String, Arc<dyn Backend>>) -> DecisionContext<'a> {
        DecisionContext {
            planner: Planner {
                template: &self.template,
                shots: &[],
                store: &self.store,
                policy: &self.policy,
                journal: None,
            },
            backends,
            judge_template: &self.judge,
            seed: 5,
        }
    }
}

fn fixture(pairs: &[(String, &str)]) -> Arc<FixtureBackend> {
    Arc::new(FixtureBackend::new(
        "fx",
        pairs.iter().map(|(k, v)| (k.clone(), v.to_string())).collect(),
    ))
}

#[test]
fn vote_with_perfect_oracle_picks_gold_without_tie() {
    let e = env(5);
    let oracle: Arc<dyn Backend> = Arc::new(OracleBackend::new("gpt", &e.manifest, OracleBehavior::Perfect).unwrap());
    let backends = HashMap::from([("gpt".to_string(), oracle)]);
    for s in &e.manifest.samples {
        let out = decide(s, &[], &DecisionStrategy::vote("gpt", 5), &e.ctx(&backends)).unwrap();
        assert_eq!(Some(out.final_index), s.gold);
        assert!(!out.tie_broken);
        assert_eq!(out.inputs.len(), 5);
    }
}

#[test]
fn vote_drops_unparseable_runs_and_breaks_ties_low() {
    let e = env(1);
    let s = &e.manifest.samples[0];
    let id = &s.sample_id;
    // runs 0..5 answer A, A, B, B, garbage (twice, so the re-ask fails too)
    let fx = fixture(&[
        (format!("plan/{id}/0"), "Answer: (A)"),
        (format!("plan/{id}/1"), "Answer: (A)"),
        (format!("plan/{id}/2"), "Answer: (B)"),
        (format!("plan/{id}/3"), "Answer: (B)"),
        (format!("plan/{id}/4"), "not sure"),
    ]);
    let backends = HashMap::from([("gpt".to_string(), fx as Arc<dyn Backend>)]);
    let out = decide(s, &[], &DecisionStrategy::vote("gpt", 5), &e.ctx(&backends)).unwrap();
    assert_eq!((out.final_index, out.tie_broken), (0, true));
    assert_eq!(out.inputs.len(), 4);
    assert_eq!(out.notes.len(), 1);

    let fx = fixture(&[(format!("plan/{id}"), "no idea")]);
    let backends = HashMap::from([("gpt".to_string(), fx as Arc<dyn Backend>)]);
    let err = decide(s, &[], &DecisionStrategy::vote("gpt", 3), &e.ctx(&backends)).unwrap_err();
    assert!(matches!(err, Error::AllRunsUnparseable(_)), "{err}");
}

#[test]
fn vote_runs_differ_only_by_seed() {
    let e = env(1);
    let s = &e.manifest.samples[0];
    let fx = Arc::new(FixtureBackend::new("fx", HashMap::new()).with_default("(C)"));
    let counting = Arc::new(CountingBackend::new(fx));
    let backends = HashMap::from([("gpt".to_string(), counting.clone() as Arc<dyn Backend>)]);
    let out = decide(s, &[], &DecisionStrategy::vote("gpt", 4), &e.ctx(&backends)).unwrap();
    assert_eq!(counting.calls(), 4);
    let mut digests = out.inputs.clone();
    digests.sort();
    digests.dedup();
    assert_eq!(digests.len(), 4, "each run carries its own seed");
}

#[test]
fn arbitration_uses_judge_on_disagreement() {
    let e = env(1);
    let s = &e.manifest.samples[0];
    let id = &s.sample_id;
    let gpt = fixture(&[
        (format!("plan/{id}"), "Reasoning: r\nAnswer: (A)"),
        (format!("judge/{id}"), "Plan 2 is more convincing. Answer: (B)"),
    ]);
    let claude = fixture(&[(format!("plan/{id}"), "Reasoning: r\nAnswer: (B)")]);
    let backends = HashMap::from([
        ("gpt".to_string(), gpt.clone() as Arc<dyn Backend>),
        ("claude".to_string(), claude as Arc<dyn Backend>),
    ]);
    let strategy = DecisionStrategy::arbitrate("gpt", "claude", Some("gpt"));
    let out = decide(s, &[], &strategy, &e.ctx(&backends)).unwrap();
    assert_eq!(out.final_index, 1);
    assert!(out.judge_called);
    assert!(out.judge_raw.as_deref().unwrap().contains("Plan 2"));
    assert_eq!(gpt.calls(), 2);
}

#[test]
fn arbitration_falls_back_to_plan_one() {
    let e = env(1);
    let s = &e.manifest.samples[0];
    let id = &s.sample_id;
    let strategy = DecisionStrategy::arbitrate("gpt", "claude", Some("judge"));
    let claude = fixture(&[(format!("plan/{id}"), "Answer: (D)")]);
    let gpt = fixture(&[(format!("plan/{id}"), "Answer: (C)")]);

    // unparseable judge
    let judge = fixture(&[(format!("judge/{id}"), "Both are fine.")]);
    let backends: HashMap<String, Arc<dyn Backend>> = HashMap::from([
        ("gpt".to_string(), gpt.clone() as Arc<dyn Backend>),
        ("claude".to_string(), claude.clone() as Arc<dyn Backend>),
        ("judge".to_string(), judge as Arc<dyn Backend>),
    ]);
    let out = decide(s, &[], &strategy, &e.ctx(&backends)).unwrap();
    assert_eq!(out.final_index, 2);
    assert!(out.notes[0].contains("unparseable"));

    // failing judge
    let mut backends = backends;
    backends.insert("judge".into(), fixture(&[]) as Arc<dyn Backend>);
    let out = decide(s, &[], &strategy, &e.ctx(&backends)).unwrap();
    assert_eq!(out.final_index, 2);
    assert!(out.notes[0].contains("judge call failed"));

    // one planner failing leaves the other's answer
    backends.insert("gpt".into(), fixture(&[(format!("plan/{id}"), "??")]) as Arc<dyn Backend>);
    let out = decide(s, &[], &strategy, &e.ctx(&backends)).unwrap();
    assert_eq!(out.final_index, 3);
    assert!(!out.judge_called);
}

#[test]
fn agreement_short_circuits_unless_forced() {
    let e = env(20);
    let oracle = |name: &str| -> Arc<dyn Backend> {
        Arc::new(OracleBackend::new(name, &e.manifest, OracleBehavior::Perfect).unwrap())
    };
    let hostile = Arc::new(CountingBackend::new(Arc::new(
        FixtureBackend::new("judge", HashMap::new()).with_default("Answer: (D)"),
    )));
    let backends = HashMap::from([
        ("gpt".to_string(), oracle("gpt")),
        ("claude".to_string(), oracle("claude")),
        ("judge".to_string(), hostile.clone() as Arc<dyn Backend>),
    ]);
    let mut strategy = DecisionStrategy::arbitrate("gpt", "claude", Some("judge"));
    for s in &e.manifest.samples {
        let out = decide(s, &[], &strategy, &e.ctx(&backends)).unwrap();
        assert_eq!(Some(out.final_index), s.gold);
        assert!(!out.judge_called);
    }
    assert_eq!(hostile.calls(), 0);

    strategy.force_judge = true;
    let s = e.manifest.samples.iter().find(|s| s.gold != Some(3)).unwrap();
    let out = decide(s, &[], &strategy, &e.ctx(&backends)).unwrap();
    assert!(out.judge_called);
    assert_eq!(out.final_index, 3);
    assert_eq!(hostile.calls(), 1);
}

#[test]
fn unknown_backend_in_strategy_is_a_config_error() {
    let e = env(1);
    let backends = HashMap::new();
    let err = decide(&e.manifest.samples[0], &[], &DecisionStrategy::single("gpt"), &e.ctx(&backends)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = decide(
        &e.manifest.samples[0],
        &[],
        &DecisionStrategy { kind: "coin-flip".into(), ..DecisionStrategy::single("gpt") },
        &e.ctx(&backends),
    )
    .unwrap_err();
    assert!(err.to_string().contains("coin-flip"));
}
