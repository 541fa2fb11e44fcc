//! Declarative pipeline configuration.
//!
//! Resolution order: preset, then the TOML file, then `--set key=value`
//! overrides with flat dotted keys (`pretrain.lr=3e-4`).

use std::fs;
use std::path::{Path, PathBuf};

use linevlp_core::crops::CropSpec;
use linevlp_core::synthetic::SceneSpec;
use linevlp_core::Taxonomy;
use linevlp_model::detector::DetectorConfig;
use linevlp_model::encoders::EncoderConfig;
use linevlp_model::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Env var that overrides the configured output root.
pub const OUT_ENV: &str = "LINEVLP_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Single-CPU scale.
    Desk,
    /// Published hyperparameters (needs far more compute than a desk).
    Full,
    /// Seconds-long runs for plumbing tests.
    Smoke,
}

impl std::str::FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            "smoke" => Ok(Preset::Smoke),
            other => Err(CliError::Config(format!("unknown preset `{other}` (desk, full, smoke)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub synth: u64,
    pub curate: u64,
    pub pretrain: u64,
    pub transition: u64,
    pub detect: u64,
}

impl Seeds {
    /// Distinct per-stage seeds derived from one base seed.
    pub fn from_base(base: u64) -> Self {
        let s = base.wrapping_mul(1000);
        Self {
            synth: s,
            curate: s + 1,
            pretrain: s + 2,
            transition: s + 3,
            detect: s + 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub instances_per_category: usize,
    /// Held-out instances per category for retrieval and probe checks.
    pub heldout_per_category: usize,
    /// Square side of instance renders.
    pub instance_size: u32,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Scene layout; its `seed` field is replaced by `seeds.synth`.
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionConfig {
    pub epochs: usize,
    pub n_sizes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub out_dir: PathBuf,
    /// Taxonomy JSON; the built-in desk taxonomy when absent.
    pub taxonomy: Option<PathBuf>,
    pub seeds: Seeds,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub transition: TransitionConfig,
    pub detect: DetectorConfig,
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                preset: p,
                out_dir: PathBuf::from("runs/desk"),
                taxonomy: None,
                seeds: Seeds::from_base(0),
                synth: SynthConfig {
                    instances_per_category: 120,
                    heldout_per_category: 30,
                    instance_size: 64,
                    train_scenes: 108,
                    test_scenes: 12,
                    scene: SceneSpec::default(),
                },
                pretrain: PretrainConfig::desk(),
                transition: TransitionConfig { epochs: 5, n_sizes: 3 },
                detect: DetectorConfig::desk(),
            },
            Preset::Full => Self {
                preset: p,
                out_dir: PathBuf::from("runs/full"),
                pretrain: PretrainConfig::default(),
                transition: TransitionConfig { epochs: 15, n_sizes: 3 },
                detect: DetectorConfig::default(),
                synth: SynthConfig {
                    instance_size: 224,
                    ..Self::preset(Preset::Desk).synth
                },
                ..Self::preset(Preset::Desk)
            },
            Preset::Smoke => Self {
                preset: p,
                out_dir: PathBuf::from("runs/smoke"),
                taxonomy: None,
                seeds: Seeds::from_base(0),
                synth: SynthConfig {
                    instances_per_category: 4,
                    heldout_per_category: 2,
                    instance_size: 32,
                    train_scenes: 4,
                    test_scenes: 2,
                    scene: SceneSpec {
                        image_size: (128, 128),
                        objects_per_scene: (1, 2),
                        object_size: (24, 48),
                        ..SceneSpec::default()
                    },
                },
                pretrain: PretrainConfig {
                    encoder: EncoderConfig {
                        embed_dim: 16,
                        image_size: (32, 32),
                        depth: 1,
                        heads: 2,
                        mlp_ratio: 2,
                        text_depth: 1,
                        ..EncoderConfig::default()
                    },
                    epochs: 1,
                    batch_size: 8,
                    ..PretrainConfig::desk()
                },
                transition: TransitionConfig { epochs: 1, n_sizes: 2 },
                detect: DetectorConfig {
                    input_size: (128, 128),
                    epochs: 1,
                    batch_size: 2,
                    ..DetectorConfig::desk()
                },
            },
        }
    }

    /// Resolves preset, optional file and dotted overrides, then validates.
    pub fn resolve(preset: Option<Preset>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
                let t: toml::Table =
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                Some(t)
            }
            None => None,
        };
        // an explicit flag wins over the file's preset key
        let preset = match (preset, file_table.as_ref().and_then(|t| t.get("preset"))) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| CliError::Config("`preset` must be a string".into()))?
                .parse()?,
            (None, None) => Preset::Desk,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| CliError::Config(e.to_string()))?;
        let mut overlay = file_table.unwrap_or_default();
        overlay.remove("preset");
        for kv in overrides {
            set_dotted(&mut overlay, kv)?;
        }
        merge(&mut base, overlay.clone());
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.check_known_keys(&overlay)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Nested model configs accept unknown keys on their own, so every
    /// overlay key must survive a round trip.
    fn check_known_keys(&self, overlay: &toml::Table) -> Result<()> {
        let round = toml::Table::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        find_unknown(overlay, &round, "", &mut unknown);
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("unknown config key(s): {}", unknown.join(", "))))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: String| Err(CliError::Config(e));
        self.pretrain.validate().map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
        self.detect
            .validate(self.pretrain.encoder.patch_size)
            .map_err(|e| CliError::Config(format!("detect: {e}")))?;
        self.synth.scene.validate().map_err(|e| CliError::Config(format!("synth.scene: {e}")))?;
        CropSpec::with_sizes(self.transition.n_sizes)
            .validate()
            .map_err(|e| CliError::Config(format!("transition: {e}")))?;
        let s = &self.synth;
        if s.instances_per_category == 0 || s.heldout_per_category == 0 {
            return cfg("synth: instance counts must be positive".into());
        }
        if s.train_scenes == 0 || s.test_scenes == 0 {
            return cfg("synth: scene counts must be positive".into());
        }
        if s.instance_size < 16 {
            return cfg(format!("synth.instance_size {} < 16", s.instance_size));
        }
        if self.transition.epochs == 0 {
            return cfg("transition.epochs must be positive".into());
        }
        if let Some(p) = &self.taxonomy {
            if !p.is_file() {
                return cfg(format!("taxonomy file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn load_taxonomy(&self) -> Result<Taxonomy> {
        match &self.taxonomy {
            None => Ok(Taxonomy::desk()),
            Some(p) => read_taxonomy(p),
        }
    }

    /// Output root: the env var wins over the configured directory.
    pub fn out_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn read_taxonomy(path: &Path) -> Result<Taxonomy> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read taxonomy {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("taxonomy {}: {e}", path.display())))
}

fn set_dotted(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{kv}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}` descends into a non-table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn find_unknown(overlay: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in overlay {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(ot)) => find_unknown(ot, kt, &path, out),
            _ => {}
        }
    }
}

/// Hex SHA-256 over the JSON form of `value` and upstream hashes.
pub fn config_hash<T: Serialize>(stage: &str, value: &T, upstream: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(value).expect("config serializes"));
    for u in upstream {
        h.update([0]);
        h.update(u.as_bytes());
    }
    hex::encode(h.finalize())
}
