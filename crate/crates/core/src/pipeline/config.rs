use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::SplitRatios;
use crate::error::{Error, Result};
use crate::metrics::STUB_SCORER_NAME;
use crate::model::ModelConfig;
use crate::training::{config_hash, Stage, StageConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Output of `gen-data`: dataset splits, scene sidecars, feature cache.
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    /// Additional training datasets, e.g. augmented ones.
    pub train_extra: Vec<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
            train_extra: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    pub split: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            split: SplitRatios::default(),
        }
    }
}

/// Everything a command needs. Stage tables may be partial; missing keys
/// take the stage defaults.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub scorer: String,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain_lm: StageConfig,
    pub tqpp: StageConfig,
    pub pdmp: StageConfig,
    pub hccp: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scorer: STUB_SCORER_NAME.into(),
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain_lm: StageConfig::defaults(Stage::PretrainLm),
            tqpp: StageConfig::defaults(Stage::Tqpp),
            pdmp: StageConfig::defaults(Stage::Pdmp),
            hccp: StageConfig::defaults(Stage::Hccp),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    seed: Option<u64>,
    scorer: Option<String>,
    #[serde(default)]
    paths: PathsConfig,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    model: ModelConfig,
    pretrain_lm: Option<toml::Table>,
    tqpp: Option<toml::Table>,
    pdmp: Option<toml::Table>,
    hccp: Option<toml::Table>,
}

fn merge_stage(stage: Stage, overrides: Option<toml::Table>) -> Result<StageConfig> {
    let defaults = StageConfig::defaults(stage);
    let Some(overrides) = overrides else {
        return Ok(defaults);
    };
    let mut table = toml::Table::try_from(&defaults).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        table.insert(k, v);
    }
    let cfg: StageConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[{}]: {}", stage.as_str().replace('-', "_"), e.message())))?;
    if cfg.stage != stage {
        return Err(Error::Config(format!("table for {stage} declares stage {}", cfg.stage)));
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let defaults = Self::default();
        Ok(Self {
            seed: raw.seed.unwrap_or(defaults.seed),
            scorer: raw.scorer.unwrap_or(defaults.scorer),
            paths: raw.paths,
            data: raw.data,
            model: raw.model,
            pretrain_lm: merge_stage(Stage::PretrainLm, raw.pretrain_lm)?,
            tqpp: merge_stage(Stage::Tqpp, raw.tqpp)?,
            pdmp: merge_stage(Stage::Pdmp, raw.pdmp)?,
            hccp: merge_stage(Stage::Hccp, raw.hccp)?,
        })
    }

    /// Loads a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.data_dir);
        fix(&mut self.paths.checkpoint_dir);
        fix(&mut self.paths.report_dir);
        self.paths.train_extra.iter_mut().for_each(fix);
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::PretrainLm => &self.pretrain_lm,
            Stage::Tqpp => &self.tqpp,
            Stage::Pdmp => &self.pdmp,
            Stage::Hccp => &self.hccp,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::PretrainLm => &mut self.pretrain_lm,
            Stage::Tqpp => &mut self.tqpp,
            Stage::Pdmp => &mut self.pdmp,
            Stage::Hccp => &mut self.hccp,
        }
    }

    /// Hash recorded in every artifact produced under this configuration.
    /// Paths are excluded so that moving a run directory keeps the hash.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            seed: u64,
            scorer: &'a str,
            model: &'a ModelConfig,
            stages: [&'a StageConfig; 4],
        }
        config_hash(&Hashed {
            seed: self.seed,
            scorer: &self.scorer,
            model: &self.model,
            stages: [&self.pretrain_lm, &self.tqpp, &self.pdmp, &self.hccp],
        })
    }
}
