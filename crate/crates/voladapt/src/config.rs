//! Declarative run configuration: TOML (or JSON) files with a versioned
//! schema, environment-variable overrides, and a content hash that is
//! embedded in every artifact a run produces.

use crate::engines::{AdaptConfig, BenchmarkConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::nets::Arch;
use crate::phantom::{DatasetSpec, OrganSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "VOLADAPT_";

/// One organ class; its class id is its position in the `organs` list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganConfig {
    pub name: String,
    pub center_range: [(f64, f64); 3],
    pub radii_range: [(f64, f64); 3],
    pub intensity_mean: f64,
    pub intensity_sigma: f64,
    #[serde(default)]
    pub allow_overlap: bool,
}

impl OrganConfig {
    pub fn to_spec(&self, class_id: usize) -> OrganSpec {
        OrganSpec {
            class_id,
            center_range: self.center_range,
            radii_range: self.radii_range,
            intensity_mean: self.intensity_mean,
            intensity_sigma: self.intensity_sigma,
            allow_overlap: self.allow_overlap,
        }
    }
}

/// Preprocessing constants applied to every volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub target_spacing: f64,
    pub orientation: String,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        // phantom intensities are already in [0, 1]; CT windows (-175, 250)
        // are set in configs that ingest real data
        PreprocessConfig { clip_lo: 0.0, clip_hi: 1.0, target_spacing: 1.5, orientation: "RAS".into() }
    }
}

/// The full declarative run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub arch: Arch,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub organs: Vec<OrganConfig>,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
    pub target: Option<DatasetSpec>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    /// Parse, apply environment overrides, and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Config(format!("config file {} not found", path.display()))
            }
            _ => Error::Io(e),
        })?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let mut value: toml::Value = if is_json {
            let json: serde_json::Value = serde_json::from_str(&text)?;
            json_to_toml(&json)?
        } else {
            text.parse::<toml::Value>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        apply_env_overrides(&mut value, std::env::vars())?;
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.organs.is_empty() {
            return Err(Error::Config("at least one organ class is required".into()));
        }
        if self.arch.n_classes != self.organs.len() {
            return Err(Error::Config(format!(
                "arch.n_classes = {} but {} organs are configured",
                self.arch.n_classes,
                self.organs.len()
            )));
        }
        for (i, o) in self.organ_specs().iter().enumerate() {
            o.validate().map_err(|e| Error::Config(format!("organ {i}: {e}")))?;
        }
        for ds in &self.datasets {
            ds.validate(self.organs.len())?;
        }
        if let Some(t) = &self.target {
            t.validate(self.organs.len())?;
        }
        self.pretrain.validate()?;
        self.adapt.validate()?;
        if !(self.preprocess.clip_lo < self.preprocess.clip_hi) {
            return Err(Error::Config("preprocess window requires clip_lo < clip_hi".into()));
        }
        crate::volume::Orientation::parse(&self.preprocess.orientation)
            .map_err(|e| Error::Config(format!("preprocess.orientation: {e}")))?;
        for &organ in &self.benchmark.organs {
            if organ >= self.organs.len() {
                return Err(Error::Config(format!("benchmark organ {organ} out of range")));
            }
        }
        Ok(())
    }

    pub fn organ_specs(&self) -> Vec<OrganSpec> {
        self.organs.iter().enumerate().map(|(i, o)| o.to_spec(i)).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.organs.iter().map(|o| o.name.clone()).collect()
    }

    /// Content hash of the canonicalized (JSON, sorted keys) configuration.
    /// Execution details that cannot change results (output directory,
    /// worker count) are excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
            if let Some(bench) = obj.get_mut("benchmark").and_then(|b| b.as_object_mut()) {
                bench.remove("workers");
            }
        }
        let canonical = serde_json::to_string(&v).expect("config serializes");
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }
}

/// FNV-1a 64-bit content digest.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Overlay `VOLADAPT_SECTION__KEY=value` environment variables onto the raw
/// config tree. Double underscores separate path segments; values parse as
/// TOML literals with a string fallback.
pub fn apply_env_overrides(
    value: &mut toml::Value,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    let mut overrides: Vec<(String, String)> =
        vars.filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    overrides.sort();
    for (key, raw) in overrides {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        // parse as a TOML literal (numbers, booleans, arrays), else string
        let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
            Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap_or(toml::Value::String(raw.clone())),
            _ => toml::Value::String(raw.clone()),
        };
        let mut node = &mut *value;
        for seg in &path[..path.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key} crosses a non-table value")))?;
            node = table
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key} crosses a non-table value")))?;
        table.insert(path.last().unwrap().clone(), parsed);
    }
    Ok(())
}

fn json_to_toml(v: &serde_json::Value) -> Result<toml::Value> {
    Ok(match v {
        serde_json::Value::Null => {
            return Err(Error::Config("null is not representable in the config schema".into()))
        }
        serde_json::Value::Bool(b) => toml::Value::Boolean(*b),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                toml::Value::Integer(i)
            } else {
                toml::Value::Float(n.as_f64().unwrap_or(f64::NAN))
            }
        }
        serde_json::Value::String(s) => toml::Value::String(s.clone()),
        serde_json::Value::Array(xs) => {
            toml::Value::Array(xs.iter().map(json_to_toml).collect::<Result<Vec<_>>>()?)
        }
        serde_json::Value::Object(map) => {
            let mut t = toml::map::Map::new();
            for (k, val) in map {
                t.insert(k.clone(), json_to_toml(val)?);
            }
            toml::Value::Table(t)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
seed = 7
out_dir = "runs/test"

[arch]
base_width = 2
bottleneck_width = 8
feature_dim = 4
n_classes = 1

[[organs]]
name = "blob"
center_range = [[0.4, 0.6], [0.4, 0.6], [0.4, 0.6]]
radii_range = [[0.15, 0.2], [0.15, 0.2], [0.15, 0.2]]
intensity_mean = 0.75
intensity_sigma = 0.03

[[datasets]]
name = "site_a"
n_volumes = 2
annotation = [1]
grid_shape = [16, 16, 16]
spacing = [1.5, 1.5, 1.5]

[target]
name = "clinic"
n_volumes = 1
annotation = [1]
grid_shape = [16, 16, 16]
spacing = [1.5, 1.5, 1.5]
intensity_shift = 0.05

[pretrain]
epochs = 1
patch_size = [8, 8, 8]

[adapt]
epochs = 2
ti_start_epoch = 1
patch_size = [8, 8, 8]
"#;

    fn write_tmp(name: &str, text: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("voladapt-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_config_parses_and_hashes_stably() {
        let p = write_tmp("min.toml", MINIMAL);
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.organs.len(), 1);
        let h1 = cfg.hash();
        let h2 = RunConfig::load(&p).unwrap().hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("[pretrain]", "[pretrain]\nbogus_key = 3");
        let p = write_tmp("bad.toml", &bad);
        let err = RunConfig::load(&p).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let bad = MINIMAL.replace("n_classes = 1", "n_classes = 3");
        let p = write_tmp("mismatch.toml", &bad);
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn env_overrides_apply_by_path() {
        let mut v: toml::Value = MINIMAL.parse().unwrap();
        apply_env_overrides(
            &mut v,
            vec![
                ("VOLADAPT_SEED".to_string(), "99".to_string()),
                ("VOLADAPT_PRETRAIN__EPOCHS".to_string(), "3".to_string()),
            ]
            .into_iter(),
        )
        .unwrap();
        let cfg: RunConfig = v.try_into().unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.pretrain.epochs, 3);
    }

    #[test]
    fn hash_changes_with_content() {
        let p1 = write_tmp("h1.toml", MINIMAL);
        let p2 = write_tmp("h2.toml", &MINIMAL.replace("seed = 7", "seed = 8"));
        assert_ne!(RunConfig::load(&p1).unwrap().hash(), RunConfig::load(&p2).unwrap().hash());
    }

    #[test]
    fn json_config_is_accepted() {
        let p = write_tmp("min.toml", MINIMAL);
        let cfg = RunConfig::load(&p).unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let pj = write_tmp("min.json", &json);
        let cfg2 = RunConfig::load(&pj).unwrap();
        assert_eq!(cfg.hash(), cfg2.hash());
    }
}
