//! Run configuration: one JSON document whose every field can be overridden
//! by a dotted `--key value` pair.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ensure, Error, Result};
use crate::eval::{AblationConfig, NetworkConfig, TrainSchedule};
use crate::geometry::SceneConfig;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "SSC_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/scenes"),
            checkpoint: PathBuf::from("runs/checkpoint"),
            report: PathBuf::from("runs/report"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required; there is no default seed.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            paths: Paths::default(),
            scene: SceneConfig::default(),
            network: NetworkConfig::default(),
            ablation: AblationConfig::default(),
            schedule: TrainSchedule::default(),
        }
    }

    /// Reads `path`, or the file named by [`CONFIG_ENV`], or nothing, then
    /// applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut doc = match path.map(Path::to_path_buf).or(env) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?
            }
            None => Value::Object(Map::new()),
        };
        for (k, v) in overrides {
            set_dotted(&mut doc, k, parse_override(v))?;
        }
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> Result<Self> {
        ensure!(
            doc.get("seed").is_some_and(|s| !s.is_null()),
            "configuration has no seed; set \"seed\" in the file or pass --seed"
        );
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::contract(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.network.validate()?;
        self.ablation.validate()?;
        self.schedule.validate()?;
        ensure!(
            self.scene.num_categories() == self.network.net3d.num_categories,
            "scene has {} categories, network expects {}",
            self.scene.num_categories(),
            self.network.net3d.num_categories
        );
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `on`/`off` become booleans; anything else is parsed as JSON and falls back
/// to a plain string.
pub fn parse_override(v: &str) -> Value {
    match v {
        "on" => Value::Bool(true),
        "off" => Value::Bool(false),
        _ => serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())),
    }
}

/// Sets `a.b.c` in `doc`, creating objects along the way. Dashes in keys are
/// read as underscores.
pub fn set_dotted(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<String> = key.split('.').map(|p| p.replace('-', "_")).collect();
    ensure!(parts.iter().all(|p| !p.is_empty()), "malformed configuration key {key:?}");
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::contract(format!(
                "configuration key {key:?}: {} is not an object",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.clone(), value);
            return Ok(());
        }
        cur = map.entry(part.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}
