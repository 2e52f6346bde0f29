//! Layered run configuration.
//!
//! Precedence, lowest first: built-in defaults, a TOML file, the `DCL_SEED`
//! environment variable (training seed only), then `section.key=value`
//! command-line overrides. Unknown sections and keys are rejected by name.
//!
//! ```toml
//! [corpus]
//! n_videos = 64
//! manipulation_families = ["SPLICE_RECT"]
//!
//! [train]
//! epochs = 30
//! seed = 1
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::CorpusSpec;
use crate::encoder::EncoderConfig;
use crate::error::{DclError, Result};
use crate::experiment::XgenConfig;
use crate::inter_icl::ContrastConfig;
use crate::intra_icl::IntraConfig;
use crate::trainer::{RunConfig, TrainConfig};
use crate::views::ViewPolicy;

pub const SEED_ENV: &str = "DCL_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub corpus: CorpusSpec,
    pub train: RunConfig,
    pub encoder: EncoderConfig,
    pub views: ViewPolicy,
    pub contrast: ContrastConfig,
    pub intra: IntraConfig,
    pub xgen: XgenConfig,
}

impl Config {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            run: self.train.clone(),
            encoder: self.encoder.clone(),
            views: self.views.clone(),
            contrast: self.contrast.clone(),
            intra: self.intra.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus
            .validate()
            .map_err(|e| DclError::config("corpus", e.to_string()))?;
        self.train_config().validate()?;
        self.xgen.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Config> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| DclError::config("<file>", e.message().to_string()))?;
        from_table(table)
    }

    /// Build the effective config from an optional file, the environment and overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| DclError::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| DclError::config(p.display().to_string(), e.message().to_string()))?
            }
            None => Table::new(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: i64 = seed
                .trim()
                .parse()
                .ok()
                .filter(|s| *s >= 0)
                .ok_or_else(|| DclError::config(SEED_ENV, format!("`{seed}` is not a non-negative integer")))?;
            set_key(&mut table, "train", "seed", Value::Integer(seed));
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config = from_table(table)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DclError::config("<config>", e.to_string()))
    }
}

fn set_key(table: &mut Table, section: &str, key: &str, value: Value) {
    let sec = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    if let Value::Table(t) = sec {
        t.insert(key.to_string(), value);
    }
}

/// Apply one `section.key=value` override. The value is read as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| DclError::config(spec, "override must look like section.key=value"))?;
    let path = path.trim();
    let (section, key) = path
        .split_once('.')
        .ok_or_else(|| DclError::config(path, "override key must be section.key"))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    set_key(table, section, key, value);
    Ok(())
}

fn check_section<T: DeserializeOwned>(name: &str, value: &Value) -> Result<()> {
    value
        .clone()
        .try_into::<T>()
        .map(|_| ())
        .map_err(|e| DclError::config(name, e.message().to_string()))
}

fn from_table(table: Table) -> Result<Config> {
    let defaults = match Value::try_from(Config::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config serializes to a table"),
    };
    for (section, value) in &table {
        let known = defaults
            .get(section)
            .and_then(Value::as_table)
            .ok_or_else(|| DclError::config(section, "unknown section"))?;
        let user = value
            .as_table()
            .ok_or_else(|| DclError::config(section, "expected a [section] table"))?;
        // Keys without a default (none today) would be missed here; serde still rejects them.
        if let Some(unknown) = user.keys().find(|k| !known.contains_key(*k)) {
            return Err(DclError::config(format!("{section}.{unknown}"), "unknown key"));
        }
        match section.as_str() {
            "corpus" => check_section::<CorpusSpec>(section, value)?,
            "train" => check_section::<RunConfig>(section, value)?,
            "encoder" => check_section::<EncoderConfig>(section, value)?,
            "views" => check_section::<ViewPolicy>(section, value)?,
            "contrast" => check_section::<ContrastConfig>(section, value)?,
            "intra" => check_section::<IntraConfig>(section, value)?,
            "xgen" => check_section::<XgenConfig>(section, value)?,
            _ => {}
        }
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| DclError::config("<config>", e.message().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: DclError) -> String {
        match err {
            DclError::Config { key, .. } => key,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn file_values_and_overrides_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nepochs = 7\nbatch_size = 8\n[corpus]\nmanipulation_families = [\"WARP_PATCH\"]\n").unwrap();
        let cfg = Config::load(Some(&path), &["train.epochs=3".into(), "views.p_flip = 0.0".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.views.p_flip, 0.0);
        assert_eq!(cfg.corpus.manipulation_families, vec![crate::data::ManipKind::WarpPatch]);
        let back = Config::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(key_of(Config::from_toml_str("[train]\nepoch = 3\n").unwrap_err()), "train.epoch");
        assert_eq!(key_of(Config::from_toml_str("[trian]\nepochs = 3\n").unwrap_err()), "trian");
        let mut t = Table::new();
        apply_override(&mut t, "encoder.depth=3").unwrap();
        assert_eq!(key_of(from_table(t).unwrap_err()), "encoder.depth");
    }

    #[test]
    fn bad_values_name_their_section_or_key() {
        assert_eq!(key_of(Config::from_toml_str("[train]\nepochs = \"many\"\n").unwrap_err()), "train");
        assert_eq!(key_of(Config::load(None, &["train.phi_main=1.5".into()]).unwrap_err()), "train.phi_main");
        assert_eq!(key_of(Config::load(None, &["views.p_srm=2".into()]).unwrap_err()), "views.p_srm");
        assert!(Config::load(None, &["noequals".into()]).is_err());
    }
}
