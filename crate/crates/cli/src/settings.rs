//! Flat `key=value` settings: command defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ensfilter::{Error, Result};

/// Name of the resolved-settings snapshot written next to every output.
pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

/// Every key any command understands, with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("system", "lorenz63 | lorenz96 | ks | linear"),
    ("sigma_y", "observation noise standard deviation"),
    ("sigma_v", "process noise standard deviation"),
    ("burn_in", "spin-up steps per trajectory, or `full` for the random range"),
    ("dataset_mode", "per-trajectory | single-long"),
    ("traj", "number of trajectories to generate"),
    ("len", "observation steps per trajectory"),
    ("seed", "random seed"),
    ("data", "trajectory directory"),
    ("out", "output directory"),
    ("checkpoint", "checkpoint file"),
    ("members", "ensemble size N"),
    ("epochs", "training epochs"),
    ("lr", "learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("batch", "trajectories per optimizer step"),
    ("group", "trajectories unrolled together"),
    ("detach", "gradient-detach horizon J0"),
    ("loss", "relative | unnormalized"),
    ("activation", "relu | logistic"),
    ("bounded", "logistic | softmax"),
    ("hidden", "hidden width of the heads"),
    ("method", "enkf | esrf | letkf | ienkf | mnmef"),
    ("alpha", "multiplicative inflation of classical filters"),
    ("radius", "localization radius, or `none`"),
    ("alphas", "comma-separated inflation grid"),
    ("radii", "comma-separated radius grid (`none` allowed)"),
    ("zero_heads", "switch off every learned head"),
    ("zero_inflation", "switch off the learned inflation"),
    ("estimates", "CSV of estimated means to score"),
    ("label", "method name written to metric files"),
    ("dim", "state dimension of the linear system"),
    ("train_traj", "training trajectories of the linear experiment"),
    ("train_len", "training trajectory length of the linear experiment"),
    ("test_traj", "held-out trajectories of the linear experiment"),
    ("test_len", "held-out trajectory length of the linear experiment"),
    ("settings", "comma-separated linear-experiment settings"),
    ("workers", "worker threads, or `auto`"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl Settings {
    pub fn with_defaults(defaults: &[(&str, &str)]) -> Self {
        Self { values: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(config_err(format!("unknown setting `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config file {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies flag values that were given on the command line.
    pub fn apply_flags(&mut self, flags: &[(&str, Option<String>)]) -> Result<()> {
        for (k, v) in flags {
            if let Some(v) = v {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| config_err(format!("setting `{key}` is required")))
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| config_err(format!("invalid value `{raw}` for `{key}`")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let raw = self.raw(key)?;
        if raw.is_empty() {
            return Err(config_err(format!("setting `{key}` is required")));
        }
        Ok(PathBuf::from(raw))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(config_err(format!("invalid boolean `{other}` for `{key}`"))),
        }
    }

    /// `none` maps to `None`.
    pub fn optional<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.raw(key)? {
            "none" | "" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    /// Comma-separated list; `none` entries map to `None`.
    pub fn list<V: FromStr>(&self, key: &str) -> Result<Vec<Option<V>>> {
        self.raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "none" => Ok(None),
                _ => s.parse().map(Some).map_err(|_| config_err(format!("invalid entry `{s}` in `{key}`"))),
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Writes the snapshot into `dir`, creating it if needed.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SNAPSHOT_FILE), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut s = Settings::with_defaults(&[("members", "10"), ("seed", "0")]);
        s.apply_text("# comment\nmembers = 20\n\nseed=3\n").unwrap();
        s.apply_flags(&[("members", Some("40".into())), ("seed", None)]).unwrap();
        assert_eq!(s.get::<usize>("members").unwrap(), 40);
        assert_eq!(s.get::<u64>("seed").unwrap(), 3);
        assert_eq!(s.to_text(), "members=40\nseed=3\n");
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = Settings::default();
        assert!(matches!(s.apply_text("colour=red"), Err(Error::InvalidConfig(_))));
        assert!(matches!(s.apply_text("no equals sign"), Err(Error::InvalidConfig(_))));
        s.apply_text("members=ten").unwrap();
        assert!(matches!(s.get::<usize>("members"), Err(Error::InvalidConfig(_))));
        assert!(matches!(s.get::<usize>("seed"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn lists_and_optionals() {
        let mut s = Settings::default();
        s.apply_text("radii=1, 2.5,none\nradius=none\nzero_heads=true").unwrap();
        assert_eq!(s.list::<f64>("radii").unwrap(), vec![Some(1.0), Some(2.5), None]);
        assert_eq!(s.optional::<f64>("radius").unwrap(), None);
        assert!(s.flag("zero_heads").unwrap());
    }
}
