//! Key-value settings: defaults, then the `--config` file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgMatches, Command};

use crate::CliError;

/// One recognised key. `default: None` marks a key without a default value.
#[derive(Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help }
}

pub fn add_keys(mut cmd: Command, keys: &[Key]) -> Command {
    cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").help("key=value settings file; flags win"));
    for k in keys {
        let mut help = k.help.to_string();
        if let Some(d) = k.default {
            help.push_str(&format!(" [default: {d}]"));
        }
        cmd = cmd.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(help));
    }
    cmd
}

/// Parses `key = value` lines; `#` starts a comment. Keys may be written
/// with or without a leading `--`.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {line:?}", i + 1)))?;
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(keys: &[Key], m: &ArgMatches) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            keys.iter().filter_map(|k| k.default.map(|d| (k.name.to_string(), d.to_string()))).collect();
        if let Some(path) = m.get_one::<String>("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Core(petsynth::Error::MissingFile(PathBuf::from(format!("{path} ({e})")))))?;
            for (k, v) in parse_config(&text)? {
                if !keys.iter().any(|key| key.name == k) {
                    return Err(CliError::Usage(format!("unknown key {k:?} in {path}")));
                }
                values.insert(k, v);
            }
        }
        for k in keys {
            if let Some(v) = m.get_one::<String>(k.name) {
                values.insert(k.name.to_string(), v.clone());
            }
        }
        Ok(Settings { values })
    }

    pub fn echo(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None | Some("") => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| CliError::Usage(format!("--{key} {v:?}: {e}"))),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key)?.ok_or_else(|| CliError::Usage(format!("--{key} is required")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.get::<PathBuf>(key)
    }

    pub fn opt_path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        self.opt::<PathBuf>(key)
    }

    /// `"64"` or `"64x48"` as `(height, width)`.
    pub fn size(&self, key: &str) -> Result<Option<(usize, usize)>, CliError> {
        let Some(v) = self.raw(key).filter(|v| !v.is_empty()) else { return Ok(None) };
        let bad = || CliError::Usage(format!("--{key} {v:?}: expected N or HxW"));
        let (h, w) = match v.split_once('x') {
            Some((h, w)) => (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?),
            None => {
                let n = v.trim().parse().map_err(|_| bad())?;
                (n, n)
            }
        };
        Ok(Some((h, w)))
    }

    pub fn list_f64(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        let Some(v) = self.raw(key).filter(|v| !v.is_empty()) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("--{key} {v:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}

pub fn exists(path: &Path) -> Result<(), CliError> {
    if path.exists() { Ok(()) } else { Err(CliError::Core(petsynth::Error::MissingFile(path.to_path_buf()))) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines() {
        let m = parse_config("# comment\nseed = 3\n--suv_th=2.0  # trailing\n\n").unwrap();
        assert_eq!(m["seed"], "3");
        assert_eq!(m["suv-th"], "2.0");
        assert!(parse_config("seed 3").is_err());
        assert!(parse_config("seed=1\nseed=2").is_err());
    }
}
