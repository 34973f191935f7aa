use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainLm,
    Tqpp,
    Pdmp,
    Hccp,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::PretrainLm, Stage::Tqpp, Stage::Pdmp, Stage::Hccp];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainLm => "pretrain-lm",
            Stage::Tqpp => "tqpp",
            Stage::Pdmp => "pdmp",
            Stage::Hccp => "hccp",
        }
    }

    /// Stages that must already be completed in the starting checkpoint.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::PretrainLm | Stage::Tqpp => &[],
            Stage::Pdmp => &[Stage::PretrainLm, Stage::Tqpp],
            Stage::Hccp => &[Stage::PretrainLm, Stage::Tqpp, Stage::Pdmp],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Hyperparameters for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// ITC temperature.
    pub temperature: f64,
    pub beam_size: usize,
    /// Reward weights for target score, receptacle score and CIDEr-D.
    pub lambdas: [f64; 3],
    /// Falls back to the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub freeze_decoder: bool,
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        let base = Self {
            stage,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            temperature: 0.1,
            beam_size: 5,
            lambdas: [0.25, 0.25, 0.5],
            seed: None,
            freeze_decoder: true,
        };
        match stage {
            Stage::PretrainLm => Self {
                epochs: 30,
                freeze_decoder: false,
                ..base
            },
            Stage::Tqpp => Self { epochs: 20, ..base },
            Stage::Pdmp => Self { epochs: 60, ..base },
            Stage::Hccp => Self {
                epochs: 5,
                learning_rate: 1e-5,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.stage)));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.stage == Stage::Tqpp && self.batch_size < 2 {
            return bad("contrastive training needs batch_size >= 2".into());
        }
        if self.stage == Stage::Hccp && self.beam_size < 2 {
            return bad("the reward baseline needs beam_size >= 2".into());
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad(format!("lambdas {:?} must be non-negative", self.lambdas));
        }
        Ok(())
    }

    pub fn seed_or(&self, run_seed: u64) -> u64 {
        self.seed.unwrap_or(run_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
            let toml = toml::to_string(&StageConfig::defaults(s)).unwrap();
            assert!(toml.contains(&format!("stage = \"{s}\"")));
        }
        assert!("TQPP".parse::<Stage>().is_err());
    }

    #[test]
    fn toml_keys_mirror_fields() {
        let text = r#"
            stage = "hccp"
            epochs = 5
            batch_size = 4
            learning_rate = 1e-5
            temperature = 0.1
            beam_size = 5
            lambdas = [0.25, 0.25, 0.5]
            seed = 3
            freeze_decoder = true
        "#;
        let cfg: StageConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, Some(3));
        cfg.validate().unwrap();
        assert!(toml::from_str::<StageConfig>(&format!("{text}\nextra = 1")).is_err());
    }

    #[test]
    fn validation_rejects_degenerate_settings() {
        let mut c = StageConfig::defaults(Stage::Hccp);
        c.beam_size = 1;
        assert!(c.validate().is_err());
        let mut c = StageConfig::defaults(Stage::Tqpp);
        c.batch_size = 1;
        assert!(c.validate().is_err());
        for s in Stage::ALL {
            StageConfig::defaults(s).validate().unwrap();
        }
    }
}
