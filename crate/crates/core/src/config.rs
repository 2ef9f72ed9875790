//! Experiment configuration: TOML files, JSON run summaries, and dotted
//! `KEY=VALUE` overrides layered over the built-in defaults.
//!
//! ```
//! use cdegan::config::ExperimentConfig;
//!
//! let cfg = ExperimentConfig::resolve(Some("K = 2\n[adam]\nlr = 0.001\n"), &["I=4".into()]).unwrap();
//! assert_eq!(cfg.train.d_steps, 2);
//! assert_eq!(cfg.train.d_parents, 4);
//! assert_eq!(cfg.train.batch_size, 32);
//! assert_eq!(cfg.train.adam.lr, 0.001);
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::evolution::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub kde_resolution: usize,
    pub kde_bandwidth: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            kde_resolution: 200,
            kde_bandwidth: 0.1,
        }
    }
}

fn defaults_tree() -> Value {
    serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize")
}

/// Overlays `src` onto `dst`, rejecting keys the defaults do not have.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let key = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::config(key, "unknown key")),
                }
            }
            Ok(())
        }
        (Value::Object(_), _) => Err(Error::config(path, "expected a table")),
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Parses one override value with TOML syntax, falling back to a bare
/// string so `architecture=mlp4` works without quotes.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v present"))
            .expect("toml values map to json"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like KEY=VALUE"))?;
    let key = key.trim();
    let mut nested = parse_value(raw.trim());
    for part in key.rsplit('.') {
        if part.is_empty() {
            return Err(Error::config(key, "empty path segment"));
        }
        let mut m = Map::new();
        m.insert(part.to_string(), nested);
        nested = Value::Object(m);
    }
    merge(tree, nested, "")
}

fn source_tree(text: &str) -> Result<Value> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let mut v: Value =
            serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))?;
        // a run summary carries the resolved config under "config"
        if let Some(inner) = v.get_mut("config").map(Value::take) {
            return Ok(inner);
        }
        Ok(v)
    } else {
        let t: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string()))?;
        Ok(serde_json::to_value(t).expect("toml values map to json"))
    }
}

impl ExperimentConfig {
    /// Defaults, then `text` (TOML, JSON, or a run summary), then overrides.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut tree = defaults_tree();
        if let Some(text) = text {
            merge(&mut tree, source_tree(text)?, "")?;
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self =
            serde_json::from_value(tree).map_err(|e| Error::config("<value>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.kde_resolution < 2 {
            return Err(Error::config("kde_resolution", "must be at least 2"));
        }
        if !(self.kde_bandwidth.is_finite() && self.kde_bandwidth > 0.0) {
            return Err(Error::config("kde_bandwidth", "must be positive"));
        }
        Ok(())
    }
}
