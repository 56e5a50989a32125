//! Setting resolution: command-line flag, then config file, then default.
//!
//! The config file is line-oriented `key = value`; `#` starts a comment.
//! Keys use the long flag names, with `-` and `_` interchangeable.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: HashMap<String, String>,
    source: Option<PathBuf>,
}

fn canonical(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut cfg =
            Self::parse(&text).with_context(|| format!("in config file {}", path.display()))?;
        cfg.source = Some(path.to_path_buf());
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key=value, got `{}`", n + 1, raw.trim());
            };
            values.insert(canonical(key), value.trim().to_string());
        }
        Ok(Self {
            values,
            source: None,
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(&canonical(key)).map(String::as_str)
    }

    /// Flag value if given, else the file's value, else `None`.
    pub fn get<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| {
                let origin = self
                    .source
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "config".into());
                anyhow::anyhow!("{origin}: invalid value `{v}` for `{key}`: {e}")
            }),
        }
    }

    pub fn get_or<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    /// Boolean switch: a set flag wins, otherwise the file decides.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        Ok(self.get::<bool>(key, None)?.unwrap_or(false))
    }

    pub fn path(&self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.raw(key).map(PathBuf::from))
    }
}

/// Parameter sweep for `eval`.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    K(Vec<usize>),
    Dims(Vec<usize>),
}

impl FromStr for Sweep {
    type Err = String;

    /// Accepts `k=0..800 step 100`, `k=0..800:100`, or a list such as
    /// `D=32,64,128`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (key, range) = s
            .split_once('=')
            .ok_or_else(|| format!("sweep `{s}` must look like k=... or D=..."))?;
        let range = range.trim();
        let values: Vec<usize> = if let Some((lo, rest)) = range.split_once("..") {
            let rest = rest.trim();
            let (hi, step) = if let Some((hi, step)) = rest.split_once("step") {
                (hi.trim(), step.trim())
            } else if let Some((hi, step)) = rest.split_once(':') {
                (hi.trim(), step.trim())
            } else {
                (rest, "100")
            };
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|e| format!("bad sweep bound `{v}`: {e}"))
            };
            let (lo, hi, step) = (parse(lo.trim())?, parse(hi)?, parse(step)?);
            if step == 0 || lo > hi {
                return Err(format!("empty sweep range `{range}`"));
            }
            (lo..=hi).step_by(step).collect()
        } else {
            range.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| format!("bad sweep value `{v}`: {e}"))
                })
                .collect::<Result<_, _>>()?
        };
        if values.is_empty() {
            return Err("sweep has no values".into());
        }
        match key.trim() {
            "k" | "K" => Ok(Sweep::K(values)),
            "D" | "d" | "dims" => Ok(Sweep::Dims(values)),
            other => Err(format!(
                "unknown sweep parameter `{other}` (expected k or D)"
            )),
        }
    }
}
