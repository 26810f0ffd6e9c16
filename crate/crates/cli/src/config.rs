use std::path::Path;

use grf::flow::ModelConfig;
use grf::inversion::InversionConfig;
use grf::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Everything a run file can set. Missing keys fall back to the named
/// profile's presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inversion: InversionConfig,
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self, CliError> {
        let model = ModelConfig::preset(name);
        let train = TrainConfig::preset(name);
        match (model, train) {
            (Some(model), Some(train)) => Ok(Self {
                profile: name.to_string(),
                model,
                train,
                inversion: InversionConfig::default(),
            }),
            _ => Err(CliError::Config(format!(
                "unknown profile {name:?} (expected toy, qm9 or zinc)"
            ))),
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Self::profile("toy");
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let overrides: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let Value::Object(obj) = &overrides else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let name = match obj.get("profile") {
            None => "toy",
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(CliError::Config("profile must be a string".into())),
        };
        let mut base = serde_json::to_value(Self::profile(name)?).expect("config serialises");
        merge(&mut base, overrides);
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, overrides: Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => merge_maps(b, o),
        (b, o) => *b = o,
    }
}

fn merge_maps(base: &mut Map<String, Value>, overrides: Map<String, Value>) {
    for (k, v) in overrides {
        match base.get_mut(&k) {
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
            _ => {
                base.insert(k, v);
            }
        }
    }
}
