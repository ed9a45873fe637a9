//! Config files and the key listing shown by `--help`.

use std::fs;
use std::path::Path;

use gaitmil::data::SynthSpec;
use gaitmil::evaluation::LabelSets;
use gaitmil::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Options of `eval`, also accepted as a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `P:N:G`; absent evaluates the whole pool.
    pub ratio: Option<String>,
    /// Split size budget; defaults to the pool size.
    pub total: Option<usize>,
    /// Seed of the split draw.
    pub seed: u64,
    pub label_sets: LabelSets,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ratio: None,
            total: None,
            seed: 0,
            label_sets: LabelSets::default(),
        }
    }
}

/// Parse a JSON config file with strict key checking.
pub fn read_config<C: DeserializeOwned>(path: &Path) -> Result<C, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        let message = format!("{}: {e}", path.display());
        let key = e
            .to_string()
            .strip_prefix("unknown field `")
            .and_then(|rest| rest.split('`').next())
            .map(str::to_string);
        CliError::config(message).with_key(key)
    })
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn section<C: Serialize>(title: &str, defaults: &C) -> String {
    let mut keys = Vec::new();
    flatten("", &serde_json::to_value(defaults).expect("defaults serialize"), &mut keys);
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut text = format!("{title}\n");
    for (k, v) in keys {
        text.push_str(&format!("  {k:width$}  {v}\n"));
    }
    text
}

pub fn synth_keys() -> String {
    section("Synth config keys (JSON, --config) and defaults:", &SynthSpec::default())
}

pub fn train_keys() -> String {
    section("Train config keys (JSON, --config) and defaults:", &TrainConfig::default())
}

pub fn eval_keys() -> String {
    section("Eval config keys (JSON, --config) and defaults:", &EvalConfig::default())
}

pub fn all_keys() -> String {
    [synth_keys(), train_keys(), eval_keys()].join("\n")
}
