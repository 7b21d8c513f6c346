//! Experiment configuration: one schema-checked document covering map
//! generation, splits, training and the full-task protocol, plus the
//! run-metadata block every output file embeds.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcore::AdamParams;
use crate::gridworld::{BlockOrigin, GridMap, MapGenConfig, SplitRule, SplitSpec};
use crate::tourist::Channel;
use crate::trainer::{ModelSpec, PredictionMode, TrainSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config schema error: {0}")]
    Schema(String),
    #[error("bad override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("grid error: {0}")]
    Grid(#[from] crate::gridworld::GridError),
}

fn default_neighborhoods() -> usize {
    5
}

/// Map-suite generation: `neighborhoods` synthetic grids, optionally
/// carved into intersection-aligned training blocks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MapGenSection {
    #[serde(default = "default_neighborhoods")]
    pub neighborhoods: usize,
    pub gen: MapGenConfig,
    /// Block dims to carve; `None` uses whole neighborhoods as maps.
    #[serde(default)]
    pub blocks: Option<(usize, usize)>,
}

impl Default for MapGenSection {
    fn default() -> MapGenSection {
        MapGenSection {
            neighborhoods: default_neighborhoods(),
            gen: MapGenConfig::default(),
            blocks: Some((4, 4)),
        }
    }
}

fn default_n_episodes() -> usize {
    1000
}
fn default_maxsteps() -> usize {
    200
}
fn default_attempts() -> usize {
    3
}
fn default_mode() -> PredictionMode {
    PredictionMode::Sample
}
fn default_localizers() -> Vec<String> {
    vec!["model".into(), "bayes".into(), "random".into(), "random-distinct".into()]
}

/// Full-task evaluation settings; the window length comes from the
/// training section.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    #[serde(default = "default_n_episodes")]
    pub n_episodes: usize,
    #[serde(default = "default_maxsteps")]
    pub maxsteps: usize,
    #[serde(default = "default_attempts")]
    pub attempts: usize,
    #[serde(default = "default_mode")]
    pub mode: PredictionMode,
    #[serde(default = "default_localizers")]
    pub localizers: Vec<String>,
}

impl Default for ProtocolSection {
    fn default() -> ProtocolSection {
        ProtocolSection {
            n_episodes: default_n_episodes(),
            maxsteps: default_maxsteps(),
            attempts: default_attempts(),
            mode: default_mode(),
            localizers: default_localizers(),
        }
    }
}

/// The one experiment document. `seed` is the master seed for map
/// generation and splitting; training adds its own rng seed so repeated
/// runs on one map suite stay independent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub experiment_id: Option<String>,
    #[serde(default)]
    pub mapgen: MapGenSection,
    #[serde(default = "default_split")]
    pub split: SplitRule,
    pub train: TrainSettings,
    #[serde(default)]
    pub protocol: ProtocolSection,
}

fn default_split() -> SplitRule {
    SplitRule { n_train: 40, n_valid: 16, n_test: 16 }
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            seed: 1,
            experiment_id: None,
            mapgen: MapGenSection::default(),
            split: default_split(),
            train: TrainSettings {
                model: ModelSpec { channel: Channel::Continuous, masc_on: true, t: 1, dim: 64 },
                epochs: 200,
                batches_per_epoch: 100,
                batch_size: 64,
                adam: AdamParams::default(),
                seed: 1,
                patience: None,
                clip_norm: None,
                valid_episodes: 1000,
                test_episodes: 1000,
            },
            protocol: ProtocolSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Loads a config, starting from defaults: every key in the file
    /// overrides the default, every `--set key=value` overrides the file.
    /// Unknown keys anywhere are rejected.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
        let mut value = serde_json::to_value(ExperimentConfig::default()).expect("default config");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            let file_value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError::Schema(format!("{}: {e}", path.display())))?;
            merge_json(&mut value, file_value);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
            let parsed: serde_json::Value =
                serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)
                .map_err(|e| ConfigError::BadOverride(format!("{item}: {e}")))?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.mapgen.gen.validate()?;
        Ok(cfg)
    }

    /// Stable hash of the fully resolved config.
    pub fn config_hash(&self) -> String {
        hash_value(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Stable hash of the map-suite-defining subset (seed, generation,
    /// split); runs sharing it trained on identical maps.
    pub fn suite_hash(&self) -> String {
        let subset = serde_json::json!({
            "seed": self.seed,
            "mapgen": self.mapgen,
            "split": self.split,
        });
        hash_value(&subset)
    }

    /// Identifier for run directories and table rows.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.experiment_id {
            return id.clone();
        }
        let m = &self.train.model;
        format!(
            "{}-{}-t{}-s{}",
            match m.channel {
                Channel::Continuous => "cont",
                Channel::Discrete => "disc",
            },
            if m.masc_on { "masc" } else { "nomasc" },
            m.t,
            self.train.seed
        )
    }

    pub fn meta(&self) -> RunMeta {
        RunMeta {
            tool_version: crate::TOOL_VERSION.to_string(),
            config_hash: self.config_hash(),
            suite_hash: self.suite_hash(),
            seed: self.seed,
        }
    }
}

fn hash_value(value: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(value).expect("value serializes"));
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Recursive merge: objects merge key-wise, everything else replaces.
fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(base), serde_json::Value::Object(patch)) => {
            for (k, v) in patch {
                match base.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        base.insert(k, v);
                    }
                }
            }
        }
        (base, patch) => *base = patch,
    }
}

/// Sets a dotted path, creating intermediate objects; unknown leaves are
/// caught later by schema validation.
fn set_path(
    value: &mut serde_json::Value,
    path: &str,
    leaf: serde_json::Value,
) -> Result<(), String> {
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            format!("{} is not an object", parts[..i].join("."))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), leaf);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err("empty key".into())
}

/// Provenance block embedded in every output file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunMeta {
    pub tool_version: String,
    pub config_hash: String,
    pub suite_hash: String,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Split manifest persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    meta: RunMeta,
    train: Vec<String>,
    valid: Vec<String>,
    test: Vec<String>,
    /// Carving provenance per map id, so novelty checks survive reload.
    origins: HashMap<String, BlockOrigin>,
}

/// Writes the split manifest plus one JSON file per map under `dir`.
pub fn write_map_suite(
    dir: &Path,
    spec: &SplitSpec,
    meta: &RunMeta,
) -> Result<(), ConfigError> {
    std::fs::create_dir_all(dir)?;
    let mut origins = HashMap::new();
    for map in spec.all_maps() {
        let path = dir.join(format!("{}.json", map.map_id()));
        let mut text = serde_json::to_string_pretty(&map.to_json())
            .map_err(|e| ConfigError::Manifest(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text)?;
        if let Some(origin) = map.origin() {
            origins.insert(map.map_id().to_string(), origin.clone());
        }
    }
    let ids = |maps: &[GridMap]| maps.iter().map(|m| m.map_id().to_string()).collect();
    let manifest = ManifestFile {
        meta: meta.clone(),
        train: ids(&spec.train),
        valid: ids(&spec.valid),
        test: ids(&spec.test),
        origins,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ConfigError::Manifest(e.to_string()))?;
    text.push('\n');
    std::fs::write(dir.join("splits.json"), text)?;
    Ok(())
}

/// Loads a map suite back and re-checks the split invariants.
pub fn load_map_suite(dir: &Path) -> Result<(SplitSpec, RunMeta), ConfigError> {
    let text = std::fs::read_to_string(dir.join("splits.json"))?;
    let manifest: ManifestFile =
        serde_json::from_str(&text).map_err(|e| ConfigError::Manifest(e.to_string()))?;
    let load_maps = |ids: &[String]| -> Result<Vec<GridMap>, ConfigError> {
        ids.iter()
            .map(|id| {
                let path = dir.join(format!("{id}.json"));
                let text = std::fs::read_to_string(&path)?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| ConfigError::Manifest(format!("{id}: {e}")))?;
                let mut map = GridMap::from_json(&value)?;
                if map.map_id() != id {
                    return Err(ConfigError::Manifest(format!(
                        "manifest lists {id} but the file holds {}",
                        map.map_id()
                    )));
                }
                if let Some(origin) = manifest.origins.get(id) {
                    map = map.with_origin(origin.clone());
                }
                Ok(map)
            })
            .collect()
    };
    let spec = SplitSpec {
        train: load_maps(&manifest.train)?,
        valid: load_maps(&manifest.valid)?,
        test: load_maps(&manifest.test)?,
    };
    crate::gridworld::check_split(&spec)?;
    Ok((spec, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{carve_blocks, generate_neighborhood, make_splits};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn defaults_round_trip_and_hash_stably() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
        assert_eq!(cfg.config_hash().len(), 16);
    }

    #[test]
    fn overrides_win_over_file_and_defaults() {
        let dir = std::env::temp_dir().join(format!("gridtalk-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.json");
        std::fs::write(&path, r#"{"seed": 5, "train": {"model": {"channel": "discrete", "masc_on": false, "t": 2, "dim": 16}, "seed": 9}}"#).unwrap();
        let cfg = ExperimentConfig::load(
            Some(&path),
            &["seed=11".into(), "train.model.t=3".into(), "protocol.attempts=5".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.train.model.t, 3);
        assert_eq!(cfg.train.model.channel, Channel::Discrete);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.protocol.attempts, 5);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = std::env::temp_dir().join(format!("gridtalk-cfg2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.json");
        std::fs::write(&path, r#"{"seed": 5, "trian": {}}"#).unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &[]);
        assert!(matches!(cfg, Err(ConfigError::Schema(_))));
        let cfg = ExperimentConfig::load(None, &["protocol.atempts=2".into()]);
        assert!(matches!(cfg, Err(ConfigError::Schema(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn suite_hash_ignores_training_but_not_maps() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.train.epochs = 7;
        assert_eq!(base.suite_hash(), other.suite_hash());
        assert_ne!(base.config_hash(), other.config_hash());
        other.seed = 99;
        assert_ne!(base.suite_hash(), other.suite_hash());
    }

    #[test]
    fn map_suite_round_trips_with_origins() {
        let dir = std::env::temp_dir().join(format!("gridtalk-maps-{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let mut maps = Vec::new();
        let gen = MapGenConfig::default();
        for seed in 0..3 {
            let n = generate_neighborhood(&gen, seed).unwrap();
            maps.extend(carve_blocks(&n, 4, 4).unwrap());
        }
        let rule = SplitRule { n_train: 16, n_valid: 16, n_test: 16 };
        let spec = make_splits(&maps, rule, &mut ChaCha12Rng::seed_from_u64(1)).unwrap();
        let meta = RunMeta {
            tool_version: "test".into(),
            config_hash: "c".into(),
            suite_hash: "s".into(),
            seed: 1,
        };
        write_map_suite(&dir, &spec, &meta).unwrap();
        let (loaded, loaded_meta) = load_map_suite(&dir).unwrap();
        assert_eq!(loaded_meta, meta);
        let ids = |s: &SplitSpec| s.all_maps().map(|m| m.map_id().to_string()).collect::<Vec<_>>();
        assert_eq!(ids(&spec), ids(&loaded));
        assert!(loaded.train[0].origin().is_some());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_detects_tampered_splits() {
        let dir = std::env::temp_dir().join(format!("gridtalk-maps2-{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let mut maps = Vec::new();
        let gen = MapGenConfig::default();
        for seed in 0..2 {
            let n = generate_neighborhood(&gen, seed).unwrap();
            maps.extend(carve_blocks(&n, 4, 4).unwrap());
        }
        let rule = SplitRule { n_train: 16, n_valid: 8, n_test: 8 };
        let spec = make_splits(&maps, rule, &mut ChaCha12Rng::seed_from_u64(2)).unwrap();
        let meta = RunMeta {
            tool_version: "test".into(),
            config_hash: "c".into(),
            suite_hash: "s".into(),
            seed: 1,
        };
        write_map_suite(&dir, &spec, &meta).unwrap();
        // Move a training map into test: the loaded split must fail checks.
        let manifest_path = dir.join("splits.json");
        let mut manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
        let stolen = manifest["train"][0].clone();
        manifest["test"].as_array_mut().unwrap().push(stolen);
        std::fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(load_map_suite(&dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
