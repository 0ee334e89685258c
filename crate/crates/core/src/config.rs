//! Run configuration: JSON with sections `model`, `train`, `augment`, `data`
//! and `paths`. A file may give any subset of keys; missing keys keep their
//! defaults and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::SceneConfig;
use crate::error::{Error, Result};
use crate::features::ModelConfig;
use crate::imaging::{rotation_shift, AugmentConfig, Level};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: SceneConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            data: SceneConfig { ground_size: model.ground_size, ..SceneConfig::default() },
            model,
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            paths: PathsConfig { out_dir: PathBuf::from("runs/latest"), ..PathsConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Published hyperparameters.
    Paper,
    /// Small model and short schedule for CPU runs on synthetic data.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?} (paper|desk)"))),
        }
    }
}

fn overlay(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        }
    }

    /// K=4, C=16, batch 8, feature grid 4x16, 2000 steps (125 epochs of 128
    /// pairs), no dropout, weak layout and semantic augmentation.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.descriptors = 4;
        cfg.model.channels = 16;
        cfg.model.dropout = 0.0;
        cfg.train.batch_size = 8;
        cfg.train.epochs = 125;
        cfg.train.max_steps = Some(2000);
        cfg.train.learning_rate = 1e-3;
        cfg.augment = AugmentConfig::with_levels(Level::Weak, Level::Weak, 0);
        cfg
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Parses `text` over `base`. When the `augment` section names a semantic
    /// level, photometric fields it does not set come from that level.
    pub fn from_json_over(base: &RunConfig, text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(sections) = &patch else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut base = base.clone();
        if let Some(Value::Object(aug)) = sections.get("augment") {
            let level = |key: &str, default: Level| -> Result<Level> {
                match aug.get(key) {
                    Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("augment.{key}: {e}"))),
                    None => Ok(default),
                }
            };
            let layout = level("layout_level", base.augment.layout_level)?;
            let semantic = level("semantic_level", base.augment.semantic_level)?;
            if semantic != base.augment.semantic_level {
                base.augment = AugmentConfig::with_levels(layout, semantic, base.augment.seed);
            }
        }
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        overlay(&mut merged, &patch);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_over(&RunConfig::default(), text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.data.validate()?;
        let (ah, aw) = self.model.aerial_size;
        if !self.train.use_polar_transform && ah != aw {
            return Err(Error::Config(format!(
                "without the polar transform the aerial branch takes square images, got aerial_size {ah}x{aw}"
            )));
        }
        if self.augment.layout_level == Level::Strong {
            rotation_shift(90, self.model.ground_size.1)
                .map_err(|_| Error::Config(format!("strong layout simulation needs a ground width divisible by 4, got {}", self.model.ground_size.1)))?;
        }
        Ok(())
    }

    /// Flattened `section.key = value` lines.
    pub fn show(&self) -> String {
        let mut out = String::new();
        let v = serde_json::to_value(self).expect("config serializes");
        fn walk(prefix: &str, v: &Value, out: &mut String) {
            match v {
                Value::Object(m) => {
                    for (k, x) in m {
                        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&p, x, out);
                    }
                }
                other => out.push_str(&format!("{prefix} = {other}\n")),
            }
        }
        walk("", &v, &mut out);
        out
    }
}
