//! Layered `key=value` settings: defaults, then a paired sibling run, then a
//! config file, then command-line flags. The merged map is written next to
//! every run's outputs and can be fed back through `--config`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};
use atmosconv::net::parse_kv;

pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

#[derive(Debug, Clone, Default)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    pub fn with_defaults(pairs: &[(&str, &str)]) -> Self {
        let mut s = Self::default();
        for (k, v) in pairs {
            s.map.insert(k.to_string(), v.to_string());
        }
        s
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.map.extend(parse_kv(&text)?);
        Ok(())
    }

    /// Copies every key of a sibling run's snapshot except those listed.
    pub fn merge_sibling(&mut self, dir: &Path, skip: &[&str]) -> Result<()> {
        let path = dir.join(SNAPSHOT_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        for (k, v) in parse_kv(&text)? {
            if !skip.contains(&k.as_str()) {
                self.map.insert(k, v);
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got '{p}'"))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str).filter(|s| !s.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.str(key).ok_or_else(|| anyhow!("missing required setting '{key}'"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e| anyhow!("setting {key}='{raw}': {e}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.map.iter()
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        let text: String = self.map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Settings::with_defaults(&[("a", "1"), ("b", "2")]);
        s.apply_overrides(&["b=3".into(), "c = x".into()]).unwrap();
        assert_eq!(s.parse::<u32>("b").unwrap(), 3);
        assert_eq!(s.str("c"), Some("x"));
        assert!(s.parse::<u32>("c").is_err());
        s.write_snapshot(dir.path()).unwrap();
        let mut t = Settings::default();
        t.merge_sibling(dir.path(), &["a"]).unwrap();
        assert_eq!(t.str("a"), None);
        assert_eq!(t.str("b"), Some("3"));
        assert!(s.apply_overrides(&["nokey".into()]).is_err());
    }
}
