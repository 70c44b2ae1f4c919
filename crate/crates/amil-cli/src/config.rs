//! Flat `key = value` configuration files and resolved-config archiving.
//!
//! Keys use the same kebab-case names as the corresponding command-line
//! flags; flags override file values. The fully resolved configuration is
//! written into the output directory of every run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Errors split by exit code: usage problems exit 2, runtime problems 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parsed configuration file contents.
#[derive(Debug, Default)]
pub struct FileConfig {
    map: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> Self {
        FileConfig::default()
    }

    /// Load a flat UTF-8 `key = value` file; `#` starts a comment, blank
    /// lines are ignored, and every key must be in `allowed`.
    pub fn load(path: &Path, allowed: &[&str]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if !allowed.contains(&key.as_str()) {
                return Err(usage(format!(
                    "{}:{}: unknown configuration key `{key}`",
                    path.display(),
                    lineno + 1
                )));
            }
            map.insert(key, value.trim().to_string());
        }
        Ok(FileConfig { map })
    }

    /// Typed lookup; `None` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| usage(format!("config key `{key}`: cannot parse `{v}`: {e}"))),
        }
    }
}

/// Pick the first present value: flag, then file, then default.
pub fn resolve<T: Clone + FromStr>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(file.get::<T>(key)?.unwrap_or(default))
}

/// Archive the resolved settings as a loadable `key = value` file.
pub fn write_resolved(path: &Path, pairs: &[(&str, String)]) -> Result<(), CliError> {
    let mut text = String::from("# resolved configuration\n");
    for (k, v) in pairs {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("cannot write {}: {e}", path.display())))
}
