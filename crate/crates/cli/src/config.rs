//! Flat key-value run configuration with CLI-flag overrides.
//!
//! The file format is one `key = value` pair per line, `#` comments, no
//! sections. Command-line flags win over file values; the merged result is
//! echoed into the run manifest so any run can be reproduced from it.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Keys accepted in a config file; anything else is rejected.
const KNOWN_KEYS: &[&str] = &[
    "alpha",
    "alpha_r",
    "beta_prior_sd",
    "chains",
    "data",
    "eps_pd",
    "hyper_sd",
    "input",
    "intercept_sd",
    "keep",
    "layout",
    "m_file",
    "m_fixed",
    "m_mu",
    "m_sigma",
    "method",
    "methods",
    "n_drugs",
    "n_total",
    "n_total_file",
    "out_dir",
    "pi_a",
    "pi_b",
    "proposal",
    "re",
    "replicates",
    "save_draws",
    "scenario",
    "seed",
    "sigma_block",
    "sigma_d",
    "slab_anchor_sd",
    "summary",
    "tau",
    "thin",
    "warmup",
];

/// Merged configuration: file values overlaid by flag values.
#[derive(Debug, Default, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    bail!("{}:{}: expected `key = value`", path.display(), lineno + 1);
                };
                let key = key.trim();
                if !KNOWN_KEYS.contains(&key) {
                    bail!("{}:{}: unknown config key `{key}`", path.display(), lineno + 1);
                }
                values.insert(key.to_string(), value.trim().to_string());
            }
        }
        Ok(RunConfig { values })
    }

    /// Record a flag override (flags win over the file).
    pub fn set_flag<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => match raw.parse() {
                Ok(v) => Ok(Some(v)),
                Err(e) => bail!("config key `{key}`: cannot parse `{raw}`: {e}"),
            },
        }
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// All resolved values, for the manifest.
    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
