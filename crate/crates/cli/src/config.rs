//! Flat `key = value` configuration files with `[section]` headers.
//!
//! Keys before the first header are global and apply to every subcommand;
//! keys under `[train]`, `[ood]`, … apply to that subcommand only. Keys are
//! flag names without the leading dashes (`batch-size` and `batch_size`
//! are the same key). `#` and `;` start comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    global: BTreeMap<String, String>,
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ConfigFile::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = normalize(name);
                if name.is_empty() {
                    return Err(CliError::usage(format!("config line {}: empty section name", i + 1)));
                }
                cfg.sections.entry(name.clone()).or_default();
                section = Some(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::usage(format!(
                    "config line {}: expected 'key = value', got '{raw}'",
                    i + 1
                )));
            };
            let key = normalize(key);
            let value = value.trim().trim_matches('"').to_string();
            let map = match &section {
                Some(s) => cfg.sections.get_mut(s).expect("section inserted"),
                None => &mut cfg.global,
            };
            if map.insert(key.clone(), value).is_some() {
                return Err(CliError::usage(format!(
                    "config line {}: duplicate key '{key}'",
                    i + 1
                )));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Settings for `command`: global keys the command knows, overlaid with
    /// its section. Unknown keys in the section are an error.
    pub fn settings_for(&self, command: &str, known: &[String]) -> Result<Settings, CliError> {
        let mut values = BTreeMap::new();
        for (k, v) in &self.global {
            if known.contains(k) {
                values.insert(k.clone(), v.clone());
            }
        }
        if let Some(sec) = self.sections.get(command) {
            for (k, v) in sec {
                if !known.contains(k) {
                    return Err(CliError::usage(format!(
                        "unknown key '{k}' in config section [{command}]"
                    )));
                }
                values.insert(k.clone(), v.clone());
            }
        }
        Ok(Settings { values })
    }
}

/// Resolved config values for one subcommand.
#[derive(Debug, Default, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// The explicit flag if given, else the config value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                CliError::usage(format!("config key '{key}': cannot parse '{raw}': {e}"))
            }),
        }
    }

    pub fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| CliError::usage(format!("missing required option --{key}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn known(keys: &[&str]) -> Vec<String> {
        keys.iter().map(|k| k.to_string()).collect()
    }

    #[test]
    fn sections_overlay_globals() {
        let cfg = ConfigFile::parse(
            "seed = 3\nout = runs # comment\n\n[train]\nbeta = 0.25\nbatch_size=16\n[eval]\nseed = 9\n",
        )
        .unwrap();
        let s = cfg
            .settings_for("train", &known(&["seed", "beta", "batch-size"]))
            .unwrap();
        assert_eq!(s.or::<u64>(None, "seed", 0).unwrap(), 3);
        assert_eq!(s.or::<f64>(None, "beta", 0.0).unwrap(), 0.25);
        assert_eq!(s.or::<usize>(None, "batch-size", 32).unwrap(), 16);
        // explicit flags win
        assert_eq!(s.or(Some(0.5), "beta", 0.0).unwrap(), 0.5);
        assert!(s.required::<String>(None, "family").is_err());
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(ConfigFile::parse("just words\n").is_err());
        assert!(ConfigFile::parse("a = 1\na = 2\n").is_err());
        let cfg = ConfigFile::parse("[train]\nbogus = 1\n").unwrap();
        assert!(cfg.settings_for("train", &known(&["beta"])).is_err());
        let cfg = ConfigFile::parse("[train]\nbeta = x\n").unwrap();
        let s = cfg.settings_for("train", &known(&["beta"])).unwrap();
        assert!(s.pick::<f64>(None, "beta").is_err());
    }
}
