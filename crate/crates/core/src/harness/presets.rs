//! Named configurations tracing the solution's evolution and its ablations.
//!
//! Presets refer to backends by role name: `gpt` is the primary multimodal
//! planner (also the default memory extractor and judge) and `claude` the
//! second planner. A run config maps those names to concrete backends.

use std::sync::Arc;

use serde::Serialize;

use crate::decision::DecisionStrategy;
use crate::planner::PromptTemplate;
use crate::registry::Registry;
use crate::sampler::Detail;

pub const GPT: &str = "gpt";
pub const CLAUDE: &str = "claude";

pub const DEFAULT_PRESET: &str = "high-res-describe";

/// The evolution sequence, one preset per step.
pub const EVOLUTION: [&str; 5] = ["zero-shot", "four-shot", "high-res-describe", "vote5", "arbitrate-duo"];

/// Planner model and progress-video input compared at fixed prompting.
pub const INPUT_ABLATION: [&str; 3] = ["claude-single", "gpt-with-frames", "gpt-memory-only"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preset {
    pub name: String,
    /// What this preset changes, as a table label.
    pub description: String,
    pub template: PromptTemplate,
    pub strategy: DecisionStrategy,
}

fn plain_template(example_slots: usize) -> PromptTemplate {
    PromptTemplate {
        example_slots,
        require_observation_description: false,
        observation_detail: Detail::Low,
        ..PromptTemplate::default()
    }
}

fn preset(name: &str, description: &str, template: PromptTemplate, strategy: DecisionStrategy) -> Preset {
    Preset {
        name: name.into(),
        description: description.into(),
        template,
        strategy,
    }
}

/// Every shipped preset, without aliases.
pub fn catalog() -> Vec<Preset> {
    let full = PromptTemplate::default();
    vec![
        preset(
            "zero-shot",
            "Memory from the gpt backend, no worked examples",
            plain_template(0),
            DecisionStrategy::single(GPT),
        ),
        preset(
            "four-shot",
            "Four worked examples before the question",
            plain_template(4),
            DecisionStrategy::single(GPT),
        ),
        preset(
            "high-res-describe",
            "High-detail observation, described before answering",
            full.clone(),
            DecisionStrategy::single(GPT),
        ),
        preset(
            "vote5",
            "Majority vote over five gpt runs",
            full.clone(),
            DecisionStrategy::vote(GPT, 5),
        ),
        preset(
            "arbitrate-duo",
            "gpt judges between gpt and claude plans",
            full.clone(),
            DecisionStrategy::arbitrate(GPT, CLAUDE, Some(GPT)),
        ),
        preset(
            "claude-single",
            "claude plans from memory text only",
            full.clone(),
            DecisionStrategy::single(CLAUDE),
        ),
        preset(
            "gpt-with-frames",
            "gpt plans from memory text plus progress frames",
            PromptTemplate {
                include_progress_frames: true,
                ..full
            },
            DecisionStrategy::single(GPT),
        ),
    ]
}

/// Alternate names: `(alias, target)`.
pub const ALIASES: [(&str, &str); 3] = [
    ("single-gpt", "high-res-describe"),
    ("gpt-memory-only", "high-res-describe"),
    ("with-progress-frames", "gpt-with-frames"),
];

pub fn presets() -> Registry<Preset> {
    let mut reg: Registry<Preset> = Registry::new("preset");
    let all = catalog();
    for p in &all {
        reg.register(&p.name, Arc::new(p.clone()));
    }
    for (alias, target) in ALIASES {
        let p = all.iter().find(|p| p.name == target).expect("alias target");
        reg.register(
            alias,
            Arc::new(Preset {
                name: alias.into(),
                ..p.clone()
            }),
        );
    }
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_resolve_and_strategies_validate() {
        let reg = presets();
        for name in EVOLUTION.iter().chain(INPUT_ABLATION.iter()) {
            let p = reg.get(name).unwrap();
            p.strategy.validate().unwrap();
            assert_eq!(p.name, *name);
        }
        assert!(reg.get("nope").is_err());
    }

    #[test]
    fn evolution_changes_one_thing_per_step() {
        let reg = presets();
        let zero = reg.get("zero-shot").unwrap();
        let four = reg.get("four-shot").unwrap();
        let hires = reg.get("high-res-describe").unwrap();
        assert_eq!(zero.template.example_slots, 0);
        assert_eq!(four.template.example_slots, 4);
        assert_eq!(zero.strategy, four.strategy);
        assert!(!four.template.require_observation_description);
        assert!(hires.template.require_observation_description);
        assert_eq!(hires.template.observation_detail, Detail::High);
        let vote = reg.get("vote5").unwrap();
        assert_eq!(vote.template, hires.template);
        assert_eq!((vote.strategy.kind.as_str(), vote.strategy.n_runs), ("vote", 5));
        let duo = reg.get("arbitrate-duo").unwrap();
        assert_eq!(duo.strategy.backend_names(), vec![CLAUDE, GPT]);
        let frames = reg.get("with-progress-frames").unwrap();
        assert!(frames.template.include_progress_frames);
    }
}
