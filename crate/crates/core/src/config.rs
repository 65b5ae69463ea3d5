//! Run configuration shared by all subcommands.
//!
//! A config file is JSON; every field is optional and falls back to the
//! defaults below. Command-line flags are applied on top of the parsed file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataprep::{Ruleset, DEFAULT_CAP};
use crate::error::{Error, Result};
use crate::evaluator::{ExternalEvaluator, MockObjective};
use crate::optimize::OptimizerConfig;
use crate::taskvec::MergeSpec;

pub const DEFAULT_TIMEOUT_S: f64 = 3600.0;

/// Hyperparameters the adapters were trained with. Recorded for provenance
/// only; nothing here is trained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingHyperparameters {
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub learning_rate: f64,
}

impl Default for TrainingHyperparameters {
    fn default() -> Self {
        TrainingHyperparameters {
            lora_rank: crate::lora::DEFAULT_RANK,
            lora_alpha: crate::lora::DEFAULT_ALPHA,
            lora_dropout: 0.05,
            learning_rate: 5e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    /// Command template with `{checkpoint}`, `{manifest}`, `{lang}`, `{out}`.
    pub command: Option<String>,
    /// When set, the closed-form mock is used instead of `command`.
    pub mock: Option<MockObjective>,
    pub timeout_s: f64,
    /// Variables passed through to the evaluator process.
    pub env_allowlist: Vec<String>,
    /// Decoding language token; defaults to the target's proxy language.
    pub proxy_language: Option<String>,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            command: None,
            mock: None,
            timeout_s: DEFAULT_TIMEOUT_S,
            env_allowlist: vec!["PATH".into()],
            proxy_language: None,
        }
    }
}

impl EvaluatorConfig {
    pub fn external(&self, rules: Ruleset) -> Result<ExternalEvaluator> {
        let command = self.command.as_ref().ok_or_else(|| {
            Error::InvalidArgument("no evaluator command or mock configured".into())
        })?;
        let evaluator = ExternalEvaluator {
            cmd_template: command.clone(),
            timeout: Duration::from_secs_f64(self.timeout_s),
            env_allowlist: self.env_allowlist.clone(),
            rules,
        };
        evaluator.validate_template()?;
        Ok(evaluator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub merge: MergeSpec,
    pub evaluator: EvaluatorConfig,
    /// Cleaning ruleset file; the built-in ruleset when absent.
    pub rules_path: Option<PathBuf>,
    pub cap: usize,
    pub training: TrainingHyperparameters,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            optimizer: OptimizerConfig::default(),
            merge: MergeSpec::default(),
            evaluator: EvaluatorConfig::default(),
            rules_path: None,
            cap: DEFAULT_CAP,
            training: TrainingHyperparameters::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// One seed for every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.optimizer.seed = seed;
        if let Some(mock) = self.evaluator.mock.as_mut() {
            mock.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let t = self.evaluator.timeout_s;
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::InvalidArgument(format!("timeout_s must be positive, got {t}")));
        }
        if let Some(m) = &self.evaluator.mock {
            if !(0.0..=1.0).contains(&m.optimum) || !(m.floor >= 0.0) || !(m.curvature >= 0.0) {
                return Err(Error::InvalidArgument(format!("invalid mock objective {m:?}")));
            }
        }
        Ok(())
    }

    pub fn ruleset(&self) -> Result<Ruleset> {
        match &self.rules_path {
            Some(path) => Ruleset::from_file(path),
            None => Ok(Ruleset::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskvec::MergeMode;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.optimizer.budget, 10);
        assert_eq!(c.cap, 100_000);
        assert_eq!(c.training.lora_rank, 32);
        assert_eq!(c.training.lora_alpha, 64.0);
        assert_eq!(c.training.lora_dropout, 0.05);
        assert_eq!(c.training.learning_rate, 5e-5);
    }

    #[test]
    fn round_trips() {
        let mut c = RunConfig::from_json(
            r#"{"optimizer":{"budget":4,"init_points":2},
                "merge":{"lambda":0.35,"mode":"DELTA_SPACE"},
                "evaluator":{"mock":{"optimum":0.25,"floor":0.1,"curvature":2.0,"seed":0}},
                "rules_path":"rules.txt","cap":7}"#,
        )
        .unwrap();
        c.set_seed(99);
        assert_eq!(c.merge.mode, MergeMode::DeltaSpace);
        assert_eq!(c.evaluator.mock.unwrap().seed, 99);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(RunConfig::from_json(r#"{"budget":3}"#).is_err());
        let mut c = RunConfig::default();
        c.evaluator.timeout_s = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn external_needs_full_template() {
        let mut e = EvaluatorConfig::default();
        assert!(e.external(Ruleset::default()).is_err());
        e.command = Some("infer {checkpoint} {manifest} {lang}".into());
        assert!(e.external(Ruleset::default()).is_err());
        e.command = Some("infer {checkpoint} {manifest} {lang} {out}".into());
        assert!(e.external(Ruleset::default()).is_ok());
    }
}
