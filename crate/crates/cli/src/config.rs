//! JSON configs with `--set key=value` overrides.
//!
//! Layers, lowest precedence first: the type's defaults, the config file, then
//! each override in order. Unknown keys and type mismatches are reported with
//! the JSON path of the offending field.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use salient_core::trainer::TrainConfig;

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets the dotted `key` of `root`; the value is JSON when it parses as JSON
/// and a plain string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{spec}` has an empty key segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just set")
            }
            _ => bail!("override `{key}`: `{}` is not an object", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                bail!("override `{key}`: unknown key `{part}`");
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| anyhow!("override `{key}`: unknown key `{part}`"))?;
    }
    unreachable!("key has at least one segment")
}

/// Defaults, then the file at `path`, then `overrides`.
pub fn layered<T: Default + Serialize + DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut root = serde_json::to_value(T::default()).context("serializing defaults")?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Value =
            serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
        if !file.is_object() {
            bail!("{}: top level must be a JSON object", path.display());
        }
        merge(&mut root, file);
    }
    for spec in overrides {
        apply_override(&mut root, spec)?;
    }
    let text = root.to_string();
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        // positions refer to the merged document, not the user's file
        let msg = e.into_inner().to_string();
        let msg = msg
            .rsplit_once(" at line ")
            .map_or(msg.as_str(), |(m, _)| m)
            .to_string();
        anyhow!("config field `{path}`: {msg}")
    })
}

/// Fully expanded training config; `seed` (from `--seed`) beats everything.
pub fn validate_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut config: TrainConfig = layered(path, overrides)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.expand().map_err(|e| anyhow!("config: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("c.json");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_object_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let c = validate_config(Some(&write(dir.path(), "{}")), &[], None).unwrap();
        assert_eq!(c, TrainConfig::default().expand().unwrap());
        assert_eq!((c.clones, c.batch, c.lr), (32, 144, 1e-4));
        assert_eq!((c.weights.lambda_f, c.weights.lambda_d), (1.0, 18.0));
        assert_eq!(
            (c.schedule.sigma0, c.schedule.decay, c.schedule.period),
            (0.2, 0.98, 1000)
        );
    }

    #[test]
    fn precedence_flag_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"batch": 16, "lr": 0.01, "schedule": {"sigma0": 0.5}}"#);
        let c = validate_config(Some(&p), &["batch=8".into(), "schedule.decay=0.5".into()], Some(9)).unwrap();
        assert_eq!(c.batch, 8);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.schedule.sigma0, 0.5);
        assert_eq!(c.schedule.decay, 0.5);
        assert_eq!(c.schedule.period, 1000);
        assert_eq!(c.clones, 32);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn string_values_and_nulls() {
        let c = validate_config(None, &["hidden_activation=tanh".into(), "kernel.base=2.5".into()], None).unwrap();
        assert_eq!(c.hidden_activation, salient_core::nn::Activation::Tanh);
        assert_eq!(c.kernel.base, Some(2.5));
    }

    #[test]
    fn errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let err = validate_config(Some(&write(dir.path(), r#"{"batch": -1}"#)), &[], None).unwrap_err();
        assert!(err.to_string().contains("batch"), "{err}");
        let err = validate_config(Some(&write(dir.path(), r#"{"schedule": {"decay": "x"}}"#)), &[], None).unwrap_err();
        assert!(err.to_string().contains("schedule.decay"), "{err}");
        let err = validate_config(Some(&write(dir.path(), r#"{"bogus": 1}"#)), &[], None).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = validate_config(None, &["schedule.nope=1".into()], None).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
        assert!(validate_config(None, &["batch".into()], None).is_err());
        assert!(validate_config(None, &["batch=0".into()], None).is_err());
        assert!(validate_config(Some(&write(dir.path(), "[1]")), &[], None).is_err());
        assert!(validate_config(Some(&write(dir.path(), "{")), &[], None).is_err());
    }

    #[test]
    fn expanded_config_round_trips() {
        let c = validate_config(None, &["clones=4".into()], None).unwrap();
        assert_eq!(c.mmd_clone_count, Some(4));
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &serde_json::to_string(&c).unwrap());
        assert_eq!(validate_config(Some(&p), &[], None).unwrap(), c);
    }
}
