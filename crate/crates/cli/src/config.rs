//! Resolved run settings and `key = value` overrides.
//!
//! Keys are dotted paths into the serialized [`RunConfig`], e.g.
//! `inversion.steps`, `prepare.fit.lr` or `tasks.refine_steps`. List values
//! are comma-separated. `seed` is the single seed of a run; it is copied into
//! `inversion.seed` when the config is resolved.

use inrinv_core::config::KeyValues;
use inrinv_core::dataset::PrepareConfig;
use inrinv_core::inversion::InversionConfig;
use inrinv_core::tasks::TaskFitConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small networks and short runs for a single CPU.
    Desk,
    /// Full-size networks and step counts.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub inversion: InversionConfig,
    pub prepare: PrepareConfig,
    pub tasks: TaskFitConfig,
    /// Weight of the content anchor in edit and style; `None` uses the task default.
    pub content_weight: Option<f64>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (inversion, prepare, tasks) = match preset {
            Preset::Desk => (InversionConfig::desk(), PrepareConfig::desk(), TaskFitConfig::desk()),
            Preset::Full => Default::default(),
        };
        Self {
            preset,
            seed: 0,
            inversion,
            prepare,
            tasks,
            content_weight: None,
        }
    }

    /// Overlays `kv` onto this config. Unknown keys and ill-typed values are errors.
    pub fn apply(&self, kv: &KeyValues) -> Result<Self, Failure> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in kv.iter() {
            if key == "preset" {
                continue;
            }
            let slot = key
                .split('.')
                .try_fold(&mut tree, |node, part| node.get_mut(part))
                .ok_or_else(|| Failure::config(format!("unknown config key `{key}`")))?;
            *slot = parse_like(slot, raw);
        }
        serde_json::from_value(tree).map_err(|e| Failure::config(format!("config: {e}")))
    }

    /// Copies the run seed into the nested configs and validates them.
    pub fn resolved(mut self) -> Result<Self, Failure> {
        self.inversion.seed = self.seed;
        self.inversion.validate()?;
        if let Some(w) = self.content_weight {
            if !(w >= 0.0) {
                return Err(Failure::config(format!("content_weight must be >= 0, got {w}")));
            }
        }
        Ok(self)
    }
}

/// Parses `raw` into the JSON shape of the value it replaces.
fn parse_like(current: &Value, raw: &str) -> Value {
    let scalar = |s: &str| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()));
    match current {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(scalar)
                .collect(),
        ),
        _ => scalar(raw.trim()),
    }
}

/// Starting preset named by a config file, if any.
pub fn preset_of(kv: &KeyValues) -> Result<Option<Preset>, Failure> {
    match kv.get("preset") {
        None => Ok(None),
        Some("desk") => Ok(Some(Preset::Desk)),
        Some("full") => Ok(Some(Preset::Full)),
        Some(other) => Err(Failure::config(format!("unknown preset `{other}`"))),
    }
}
