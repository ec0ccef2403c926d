//! Run configuration: defaults, then a TOML file, then `--set` overrides,
//! then dedicated flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use wavesense::model::ModelConfig;
use wavesense::sensing::OcclusionConfig;
use wavesense::synth::SynthConfig;
use wavesense::training::TrainConfig;
use wavesense::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub folds: usize,
    pub val_subjects: usize,
    pub fold: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { folds: 3, val_subjects: 1, fold: 0, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub occlusion: OcclusionConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words that are not valid TOML literals are taken as strings
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply one `dotted.key=value` override to a TOML tree.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Merge `over` into `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let defaults = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    let mut tree = defaults;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let user: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut tree, user);
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        assert_eq!(resolve(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[train]\nmax_epochs = 7\nbatch_size = 8\n[split]\nfolds = 2\n").unwrap();
        let cfg = resolve(Some(&p), &["train.max_epochs=9".into(), "model.features.mrcnn.dropout=0.1".into()]).unwrap();
        assert_eq!(cfg.train.max_epochs, 9);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.split.folds, 2);
        assert_eq!(cfg.model.features.mrcnn.dropout, 0.1);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        assert!(matches!(resolve(None, &["nonsense".into()]), Err(Error::Config(_))));
        assert!(matches!(resolve(None, &["split.bogus=1".into()]), Err(Error::Config(_))));
        assert!(matches!(resolve(None, &["train.max_epochs=many".into()]), Err(Error::Config(_))));
    }
}
