//! Run configuration: a TOML file with dotted keys, overridden by
//! `--set key=value` pairs, resolved against built-in defaults.
//!
//! ```toml
//! palette = "palette.csv"
//! [train]
//! epochs = 200
//! batch_size = 1
//! source_mode = "teacher"
//! [train.arch]
//! base_channels = 16
//! [perturb]
//! noise_sigma = 0.05
//! ```

use std::path::{Path, PathBuf};

use lanegen::perturb::PerturbParams;
use lanegen::synth::SplitCounts;
use lanegen::trainer::TrainConfig;
use lanegen::ClassPalette;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train: 8,
            val: 2,
            test: 2,
            image_size: 64,
        }
    }
}

impl SynthConfig {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Noise seed; item `k` of a run uses `seed + k`.
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Palette CSV; the built-in lane palette when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub palette: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub perturb: PerturbParams,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("invalid override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` (`key=value`, dotted keys).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = Table::try_from(RunConfig::default())
            .map_err(|e| CliError::Runtime(format!("serializing defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            let parsed: Table = toml::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        let mut over = Table::new();
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| usage(format!("override `{item}` is not key=value")))?;
            set_dotted(&mut over, k.trim(), parse_value(v.trim()))?;
        }
        merge(&mut table, over);
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e| usage(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(CliError::from_core_usage)?;
        self.perturb.validate().map_err(CliError::from_core_usage)?;
        if self.synth.image_size == 0 {
            return Err(usage("synth.image_size must be positive"));
        }
        Ok(())
    }

    pub fn palette(&self) -> Result<ClassPalette, CliError> {
        match &self.palette {
            None => Ok(ClassPalette::default()),
            Some(p) if !p.exists() => Err(usage(format!("palette file {} does not exist", p.display()))),
            Some(p) => ClassPalette::load(p).map_err(CliError::from_core_usage),
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| lanegen::Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| lanegen::Error::io(&path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &[]).unwrap(), cfg);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nepochs = 5\nbatch_size = 2\n[train.arch]\nbase_channels = 8\n").unwrap();
        let cfg = RunConfig::resolve(
            Some(&p),
            &["train.epochs=7".into(), "train.source_mode=noise".into(), "perturb.noise_sigma=0.1".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.arch.base_channels, 8);
        assert_eq!(cfg.train.arch.depth, 4);
        assert_eq!(cfg.train.source_mode, lanegen::trainer::SourceMode::Noise);
        assert_eq!(cfg.perturb.noise_sigma, 0.1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        for bad in ["train.epoch=3", "train.batch_size=0", "nonsense", "train..x=1", "train.learning_rate=-1"] {
            let r = RunConfig::resolve(None, &[bad.to_string()]);
            assert_eq!(r.as_ref().map_err(CliError::exit_code).err(), Some(crate::EXIT_USAGE), "{bad}: {r:?}");
        }
    }

    #[test]
    fn missing_palette_is_usage_error() {
        let cfg = RunConfig {
            palette: Some("/nonexistent/palette.csv".into()),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.palette(), Err(CliError::Usage(_))));
    }
}
