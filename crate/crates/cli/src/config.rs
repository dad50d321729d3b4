//! Run configuration: one JSON document covering every stage, plus `--set` overrides.

use std::path::Path;

use albert_core::distill::DistillConfig;
use albert_core::labels::{LabelSpace, DEFAULT_NUM_DAMAGE};
use albert_core::metrics::NmsConfig;
use albert_core::model::ModelConfig;
use albert_core::synthdata::GenConfig;
use albert_core::training::TrainConfig;
use albert_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Damage vocabulary size, 26 or 25 (without the catch-all class).
    pub num_damage_classes: usize,
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub nms: NmsConfig,
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            num_damage_classes: DEFAULT_NUM_DAMAGE,
            data: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            nms: NmsConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies `key.path=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| file_error(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let labels = self.label_space()?;
        self.data.validate(&labels)?;
        self.model.validate()?;
        self.train.validate()?;
        self.nms.validate()?;
        self.distill.validate()?;
        let e = &self.model.encoder;
        if (self.data.height, self.data.width) != (e.image_height, e.image_width) {
            return Err(Error::Config(format!(
                "data is {}x{} but the encoder expects {}x{}",
                self.data.height, self.data.width, e.image_height, e.image_width
            )));
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::with_damage_classes(self.num_damage_classes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn file_error(path: &Path, source: std::io::Error) -> Error {
    Error::File {
        path: path.display().to_string(),
        source,
    }
}

/// Sets `a.b.c=value` in `doc`; the value parses as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    for (i, k) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not an object", path[..i].join("."))))?;
        if i + 1 == path.len() {
            obj.insert((*k).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*k).to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("path has at least one segment")
}
