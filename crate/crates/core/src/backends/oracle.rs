//! Gold-reading mock that gives the pipeline a known accuracy ceiling.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    estimate_prompt_tokens, estimate_text_tokens, Backend, BackendConfig, BackendFactory,
    BuildContext, ModelRequest, ModelResponse, Stage,
};
use crate::dataset::{DatasetManifest, PlanningSample};
use crate::error::{Error, Result};

pub const KIND: &str = "oracle-mock";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleBehavior {
    Perfect,
    /// Each answer is, with probability `p`, replaced by a uniformly chosen
    /// wrong choice. Draws are keyed on (seed, sample, stage, run) so they are
    /// reproducible and independent of call order.
    FixedErrorRate { p: f64, seed: u64 },
}

struct SampleTruth {
    gold: usize,
    n_choices: usize,
    narrations: Vec<Option<String>>,
}

pub struct OracleBackend {
    name: String,
    behavior: OracleBehavior,
    truth: HashMap<String, SampleTruth>,
}

impl OracleBackend {
    pub fn new(
        name: impl Into<String>,
        manifest: &DatasetManifest,
        behavior: OracleBehavior,
    ) -> Result<Self> {
        if let OracleBehavior::FixedErrorRate { p, .. } = behavior {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("oracle error rate {p} not in [0, 1]")));
            }
        }
        let mut truth = HashMap::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let gold = s
                .gold
                .ok_or_else(|| Error::NoGoldLabel(s.sample_id.clone()))?;
            truth.insert(
                s.sample_id.clone(),
                SampleTruth {
                    gold,
                    n_choices: s.choices.len(),
                    narrations: s.segments.iter().map(|g| g.narration.clone()).collect(),
                },
            );
        }
        Ok(Self {
            name: name.into(),
            behavior,
            truth,
        })
    }

    fn answer(&self, sample_id: &str, stage: Stage, run: &str, t: &SampleTruth) -> usize {
        let OracleBehavior::FixedErrorRate { p, seed } = self.behavior else {
            return t.gold;
        };
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(sample_id.as_bytes());
        hasher.update([0]);
        hasher.update(stage.as_str().as_bytes());
        hasher.update([0]);
        hasher.update(run.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        if rng.gen::<f64>() < p {
            let wrong = rng.gen_range(0..t.n_choices - 1);
            if wrong >= t.gold {
                wrong + 1
            } else {
                wrong
            }
        } else {
            t.gold
        }
    }
}

impl Backend for OracleBackend {
    fn id(&self) -> &str {
        &self.name
    }

    fn model_id(&self) -> &str {
        &self.name
    }

    fn send(&self, request: &ModelRequest) -> Result<ModelResponse> {
        let scope = request.scope.as_ref().ok_or_else(|| Error::BadResponse {
            backend: self.name.clone(),
            message: "oracle mock needs a scoped request".into(),
        })?;
        let truth = self
            .truth
            .get(&scope.sample_id)
            .ok_or_else(|| Error::NoGoldLabel(scope.sample_id.clone()))?;
        let text = match scope.stage {
            Stage::Memory => {
                let i = scope.segment_index.unwrap_or(0);
                truth
                    .narrations
                    .get(i)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| format!("The camera wearer performs action {}.", i + 1))
            }
            stage => {
                let run = scope.run.as_deref().unwrap_or("");
                let letter = PlanningSample::letter(self.answer(&scope.sample_id, stage, run, truth));
                if scope.attempt > 0 {
                    letter.to_string()
                } else {
                    format!(
                        "Observation: The scene is consistent with the task progress.\n\
                         Reasoning: Option ({letter}) is the step that advances the goal.\n\
                         Answer: ({letter})"
                    )
                }
            }
        };
        Ok(ModelResponse {
            prompt_tokens: estimate_prompt_tokens(request),
            completion_tokens: estimate_text_tokens(&text),
            text,
            latency_ms: 0,
            backend_id: self.name.clone(),
            retries: 0,
        })
    }
}

pub struct OracleFactory;

impl BackendFactory for OracleFactory {
    fn build(
        &self,
        name: &str,
        config: &BackendConfig,
        ctx: BuildContext<'_>,
    ) -> Result<Arc<dyn Backend>> {
        let manifest = ctx
            .manifest
            .ok_or_else(|| Error::Config(format!("oracle backend `{name}` needs a dataset")))?;
        let behavior = match config.error_rate {
            Some(p) if p > 0.0 => OracleBehavior::FixedErrorRate {
                p,
                seed: config.seed.unwrap_or(0),
            },
            _ => OracleBehavior::Perfect,
        };
        Ok(Arc::new(OracleBackend::new(name, manifest, behavior)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ChatMessage, RequestScope};
    use crate::synthetic::{synthetic_manifest, SyntheticSpec};

    fn plan_req(sample_id: &str) -> ModelRequest {
        let mut scope = RequestScope::new(Stage::Plan, sample_id);
        scope.run = Some("0".into());
        ModelRequest::new("o", vec![ChatMessage::user_text("q")]).with_scope(scope)
    }

    fn parsed_letter(text: &str) -> char {
        text.trim_end().chars().rev().nth(1).unwrap()
    }

    #[test]
    fn perfect_answers_gold() {
        let m = synthetic_manifest(&SyntheticSpec::new(20));
        let o = OracleBackend::new("o", &m, OracleBehavior::Perfect).unwrap();
        for s in &m.samples {
            let text = o.complete(&plan_req(&s.sample_id)).unwrap().text;
            assert_eq!(parsed_letter(&text), PlanningSample::letter(s.gold.unwrap()));
        }
    }

    #[test]
    fn zero_error_rate_equals_perfect() {
        let m = synthetic_manifest(&SyntheticSpec::new(50));
        let perfect = OracleBackend::new("o", &m, OracleBehavior::Perfect).unwrap();
        let p0 = OracleBackend::new("o", &m, OracleBehavior::FixedErrorRate { p: 0.0, seed: 7 })
            .unwrap();
        for s in &m.samples {
            let r = plan_req(&s.sample_id);
            assert_eq!(perfect.complete(&r).unwrap().text, p0.complete(&r).unwrap().text);
        }
    }

    #[test]
    fn half_error_rate_concentrates() {
        let m = synthetic_manifest(&SyntheticSpec::new(1000));
        let o = OracleBackend::new("o", &m, OracleBehavior::FixedErrorRate { p: 0.5, seed: 7 })
            .unwrap();
        let wrong = m
            .samples
            .iter()
            .filter(|s| {
                let text = o.complete(&plan_req(&s.sample_id)).unwrap().text;
                parsed_letter(&text) != PlanningSample::letter(s.gold.unwrap())
            })
            .count();
        let frac = wrong as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&frac), "wrong fraction {frac}");
    }

    #[test]
    fn missing_gold_and_unscoped() {
        let mut m = synthetic_manifest(&SyntheticSpec::new(3));
        let o = OracleBackend::new("o", &m, OracleBehavior::Perfect).unwrap();
        let unscoped = ModelRequest::new("o", vec![ChatMessage::user_text("q")]);
        assert!(o.complete(&unscoped).is_err());
        m.samples[1].gold = None;
        let err = OracleBackend::new("o", &m, OracleBehavior::Perfect).err().unwrap();
        assert!(matches!(err, Error::NoGoldLabel(id) if id == m.samples[1].sample_id));
    }

    #[test]
    fn memory_stage_uses_narration() {
        let m = synthetic_manifest(&SyntheticSpec::new(1));
        let o = OracleBackend::new("o", &m, OracleBehavior::Perfect).unwrap();
        let s = &m.samples[0];
        let mut scope = RequestScope::new(Stage::Memory, &s.sample_id);
        scope.segment_index = Some(0);
        let r = ModelRequest::new("o", vec![ChatMessage::user_text("q")]).with_scope(scope);
        assert_eq!(
            o.complete(&r).unwrap().text,
            s.segments[0].narration.clone().unwrap()
        );
    }
}
