//! Flat `key = value` settings: config file first, then flag overrides, then
//! defaults. The fully resolved set is what a run manifest records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mde_core::trainer::parse_kv_text;

use crate::UsageError;

/// Manifest keys that describe a run rather than configure it; a manifest
/// passed back as `--config` skips them.
const MANIFEST_ONLY: [&str; 3] = ["command", "tool_version", "created_unix"];
const ARTIFACT_PREFIX: &str = "artifact.";

#[derive(Debug, Clone, Default)]
pub struct Settings {
    pairs: Vec<(String, String)>,
}

impl Settings {
    /// Reads `path` when given; a run manifest is accepted as a config file.
    pub fn load(path: Option<&Path>) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            for (k, v) in parse_kv_text(&text)? {
                if MANIFEST_ONLY.contains(&k.as_str()) || k.starts_with(ARTIFACT_PREFIX) {
                    continue;
                }
                s.set(&k, &v);
            }
        }
        Ok(s)
    }

    /// Sets or replaces a value.
    pub fn set(&mut self, key: &str, value: &str) {
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.pairs.push((key.to_string(), value.to_string())),
        }
    }

    pub fn set_opt(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.set(key, &v.to_string());
        }
    }

    /// Applies `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{o}`")))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Fills in `defaults` and rejects keys outside `allowed`.
    pub fn resolve(&self, defaults: &[(&str, &str)], allowed_extra: &[&str]) -> Result<Resolved> {
        for (k, _) in &self.pairs {
            if !defaults.iter().any(|(d, _)| d == k) && !allowed_extra.contains(&k.as_str()) {
                return Err(UsageError(format!("unknown setting `{k}`")).into());
            }
        }
        let pairs = defaults
            .iter()
            .map(|(k, d)| (k.to_string(), self.get(k).unwrap_or(d).to_string()))
            .collect();
        Ok(Resolved { pairs })
    }
}

/// Ordered settings with every default materialized.
#[derive(Debug, Clone, Default)]
pub struct Resolved {
    pub pairs: Vec<(String, String)>,
}

impl Resolved {
    pub fn str(&self, key: &str) -> &str {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or("")
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key);
        v.parse()
            .map_err(|_| UsageError(format!("{key}: cannot parse `{v}`")).into())
    }

    /// A required path setting.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        match self.str(key) {
            "" | "none" => Err(UsageError(format!("missing required setting `{key}`")).into()),
            v => Ok(PathBuf::from(v)),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.pairs.push((key.to_string(), value.to_string())),
        }
    }

    pub fn extend(&mut self, pairs: impl IntoIterator<Item = (String, String)>) {
        for (k, v) in pairs {
            self.set(&k, v);
        }
    }

    /// The effective configuration, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Everything needed to repeat a command: its resolved settings plus the
/// artifacts it will write. Written before any computation starts.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub settings: Resolved,
    pub artifacts: Vec<(String, PathBuf)>,
}

impl RunManifest {
    pub fn new(command: &str, settings: Resolved) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            settings,
            artifacts: Vec::new(),
        }
    }

    pub fn artifact(mut self, name: &str, path: PathBuf) -> Self {
        self.artifacts.push((name.to_string(), path));
        self
    }

    pub fn seed(&self) -> &str {
        self.settings.str("seed")
    }

    pub fn to_text(&self) -> String {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut s = String::from("# mde run manifest; pass back with --config to repeat the run\n");
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "tool_version = {}", self.tool_version);
        let _ = writeln!(s, "created_unix = {created}");
        s.push_str(&self.settings.echo());
        for (k, p) in &self.artifacts {
            let _ = writeln!(s, "{ARTIFACT_PREFIX}{k} = {}", p.display());
        }
        s
    }

    /// Creates `dir` and writes `dir/manifest.txt`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
