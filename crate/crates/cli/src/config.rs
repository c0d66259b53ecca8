//! Flat key-value run configuration.
//!
//! Values come from three layers, later ones winning: built-in defaults, the
//! JSON object given with `--config`, and command-line flags. Every key a
//! command reads is recorded with the value it resolved to, so the written
//! `config.json` reruns the command on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::CliError;

/// Name of the resolved configuration written into every output directory.
pub const CONFIG_FILE: &str = "config.json";

/// Parses a real given as a decimal or as an exact fraction `p/q`.
pub fn parse_real(text: &str) -> Result<f64, String> {
    let text = text.trim();
    let value = match text.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| format!("`{text}` is not a number or fraction"))?;
            let den: f64 = den.trim().parse().map_err(|_| format!("`{text}` is not a number or fraction"))?;
            if den == 0.0 {
                return Err(format!("`{text}` divides by zero"));
            }
            num / den
        }
        None => text.parse().map_err(|_| format!("`{text}` is not a number or fraction"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("`{text}` is not finite"))
    }
}

pub struct Resolver {
    given: Map<String, Value>,
    resolved: BTreeMap<String, Value>,
    problems: Vec<String>,
}

impl Resolver {
    /// Layers `overrides` (flag values, `None` when the flag is absent) over
    /// the optional config file.
    pub fn new(file: Option<&Path>, overrides: Vec<(&str, Option<Value>)>) -> Result<Self, CliError> {
        let mut given = match file {
            None => Map::new(),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(vec![format!("cannot read config file {}: {e}", path.display())]))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(map)) => map,
                    Ok(_) => return Err(CliError::Config(vec![format!("config file {} is not a JSON object", path.display())])),
                    Err(e) => return Err(CliError::Config(vec![format!("config file {}: {e}", path.display())])),
                }
            }
        };
        for (key, value) in overrides {
            if let Some(value) = value {
                given.insert(key.to_string(), value);
            }
        }
        Ok(Self {
            given,
            resolved: BTreeMap::new(),
            problems: Vec::new(),
        })
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.given.remove(key).filter(|v| !v.is_null())
    }

    pub fn problem(&mut self, message: impl Into<String>) {
        self.problems.push(message.into());
    }

    pub fn real(&mut self, key: &str, default: f64) -> f64 {
        let Some(raw) = self.take(key) else {
            self.resolved.insert(key.into(), Value::from(default));
            return default;
        };
        let parsed = match &raw {
            Value::Number(n) => n.as_f64().ok_or_else(|| format!("{n} is not representable")),
            Value::String(s) => parse_real(s),
            other => Err(format!("expected a number or fraction, got {other}")),
        };
        self.resolved.insert(key.into(), raw);
        parsed.unwrap_or_else(|e| {
            self.problems.push(format!("{key}: {e}"));
            default
        })
    }

    fn integer(&mut self, key: &str, default: u64) -> u64 {
        let Some(raw) = self.take(key) else {
            self.resolved.insert(key.into(), Value::from(default));
            return default;
        };
        let parsed = match &raw {
            Value::Number(n) => n.as_u64(),
            Value::String(s) => s.trim().parse().ok(),
            _ => None,
        };
        self.resolved.insert(key.into(), raw.clone());
        parsed.unwrap_or_else(|| {
            self.problems.push(format!("{key}: expected a non-negative integer, got {raw}"));
            default
        })
    }

    pub fn count(&mut self, key: &str, default: usize) -> usize {
        self.integer(key, default as u64) as usize
    }

    /// An integer that may be left unset (recorded as `null`).
    pub fn optional_count(&mut self, key: &str) -> Option<usize> {
        if self.given.get(key).is_none_or(Value::is_null) {
            self.given.remove(key);
            self.resolved.insert(key.into(), Value::Null);
            return None;
        }
        Some(self.count(key, 0))
    }

    pub fn seed(&mut self, key: &str, default: u64) -> u64 {
        self.integer(key, default)
    }

    pub fn flag(&mut self, key: &str, default: bool) -> bool {
        let Some(raw) = self.take(key) else {
            self.resolved.insert(key.into(), Value::from(default));
            return default;
        };
        self.resolved.insert(key.into(), raw.clone());
        match raw {
            Value::Bool(b) => b,
            Value::String(s) if s == "true" => true,
            Value::String(s) if s == "false" => false,
            other => {
                self.problems.push(format!("{key}: expected true or false, got {other}"));
                default
            }
        }
    }

    /// A string-valued key parsed with `FromStr`.
    pub fn choice<T: FromStr>(&mut self, key: &str, default: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let text = match self.take(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s,
            Some(other) => {
                self.resolved.insert(key.into(), other.clone());
                self.problems.push(format!("{key}: expected a string, got {other}"));
                return None;
            }
        };
        self.resolved.insert(key.into(), Value::from(text.clone()));
        match text.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.problems.push(format!("{key}: {e}"));
                None
            }
        }
    }

    pub fn text(&mut self, key: &str, default: &str) -> String {
        self.choice::<String>(key, default).unwrap_or_default()
    }

    pub fn optional_path(&mut self, key: &str) -> Option<PathBuf> {
        match self.take(key) {
            None => {
                self.resolved.insert(key.into(), Value::Null);
                None
            }
            Some(Value::String(s)) => {
                self.resolved.insert(key.into(), Value::from(s.clone()));
                Some(PathBuf::from(s))
            }
            Some(other) => {
                self.resolved.insert(key.into(), other.clone());
                self.problems.push(format!("{key}: expected a path string, got {other}"));
                None
            }
        }
    }

    /// A path that must be given; an empty path stands in when it is not.
    pub fn required_path(&mut self, key: &str) -> PathBuf {
        self.optional_path(key).unwrap_or_else(|| {
            self.problems.push(format!("{key}: required"));
            PathBuf::new()
        })
    }

    /// Like [`Self::required_path`], and the path must exist.
    pub fn existing_path(&mut self, key: &str) -> PathBuf {
        let path = self.required_path(key);
        if !path.as_os_str().is_empty() && !path.exists() {
            self.problems.push(format!("{key}: {} does not exist", path.display()));
        }
        path
    }

    pub fn path_list(&mut self, key: &str) -> Vec<PathBuf> {
        let raw = self.take(key).unwrap_or(Value::Array(Vec::new()));
        self.resolved.insert(key.into(), raw.clone());
        match raw {
            Value::Array(items) => items
                .into_iter()
                .filter_map(|v| match v {
                    Value::String(s) => Some(PathBuf::from(s)),
                    other => {
                        self.problems.push(format!("{key}: expected path strings, got {other}"));
                        None
                    }
                })
                .collect(),
            other => {
                self.problems.push(format!("{key}: expected a list of paths, got {other}"));
                Vec::new()
            }
        }
    }

    /// Fails with every problem found so far plus any unknown keys, or
    /// returns the resolved document.
    pub fn finish(mut self) -> Result<Value, CliError> {
        let unknown: BTreeSet<&String> = self.given.keys().collect();
        for key in unknown {
            self.problems.push(format!("{key}: unknown key"));
        }
        if self.problems.is_empty() {
            Ok(Value::Object(self.resolved.into_iter().collect()))
        } else {
            Err(CliError::Config(self.problems))
        }
    }
}

/// Writes the resolved configuration to `dir/config.json`.
pub fn write_config(resolved: &Value, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(resolved).expect("JSON values serialize") + "\n";
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fractions_are_exact() {
        assert_eq!(parse_real("16/255").unwrap(), 16.0 / 255.0);
        assert_eq!(parse_real(" 8 / 255 ").unwrap(), 8.0 / 255.0);
        assert_eq!(parse_real("0.25").unwrap(), 0.25);
        assert!(parse_real("1/0").is_err());
        assert!(parse_real("abc").is_err());
        assert!(parse_real("1/2/3").is_err());
    }

    #[test]
    fn flags_override_file_and_defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"eta0": "8/255", "n_epoch": 3, "seed": 4}"#).unwrap();
        let mut r = Resolver::new(Some(&file), vec![("n_epoch", Some(json!("7"))), ("seed", None)]).unwrap();
        assert_eq!(r.real("eta0", 0.1), 8.0 / 255.0);
        assert_eq!(r.count("n_epoch", 1), 7);
        assert_eq!(r.seed("seed", 0), 4);
        assert_eq!(r.real("lambda_fg", 0.5), 0.5);
        let resolved = r.finish().unwrap();
        assert_eq!(resolved["eta0"], json!("8/255"));
        assert_eq!(resolved["lambda_fg"], json!(0.5));
    }

    #[test]
    fn every_problem_is_reported() {
        let mut r = Resolver::new(
            None,
            vec![("eta0", Some(json!("x"))), ("n_epoch", Some(json!(-1))), ("bogus", Some(json!(1)))],
        )
        .unwrap();
        r.real("eta0", 0.1);
        r.count("n_epoch", 1);
        r.required_path("dataset");
        let Err(CliError::Config(problems)) = r.finish() else {
            panic!("expected config error");
        };
        assert_eq!(problems.len(), 4, "{problems:?}");
        assert!(problems.iter().any(|p| p.starts_with("bogus")));
    }

    #[test]
    fn resolved_config_replays() {
        let mut r = Resolver::new(None, vec![("eta0", Some(json!("16/255")))]).unwrap();
        r.real("eta0", 0.0);
        r.flag("use_fg", true);
        let resolved = r.finish().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_config(&resolved, dir.path()).unwrap();
        let mut again = Resolver::new(Some(&dir.path().join(CONFIG_FILE)), vec![]).unwrap();
        assert_eq!(again.real("eta0", 0.0), 16.0 / 255.0);
        assert!(again.flag("use_fg", false));
        assert_eq!(again.finish().unwrap(), resolved);
    }
}
