//! Line-oriented `[section]` / `key = value` configuration files, plus
//! the typed experiment configuration the CLI consumes.

use crate::attacks::Family;
use crate::dataio::DatasetProfile;
use crate::defense::Variant;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Parsed key/value sections; keys keep declaration casing, lookups are
/// exact.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}: unterminated section header", lineno + 1)))?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
            if current.is_empty() {
                return Err(Error::config(format!("line {}: key before any [section]", lineno + 1)));
            }
            sections
                .get_mut(&current)
                .expect("current section exists")
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(RawConfig { sections })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<String> {
        self.get(section, key)
            .map(|s| s.to_string())
            .ok_or_else(|| Error::config(format!("missing key '{}' in section [{}]", key, section)))
    }

    pub fn parse_value<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let raw = self.require(section, key)?;
        raw.parse().map_err(|_| {
            Error::config(format!("bad value '{}' for key '{}' in section [{}]", raw, key, section))
        })
    }

    pub fn parse_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::config(format!("bad value '{}' for key '{}' in section [{}]", raw, key, section))
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Untargeted,
    Targeted,
}

impl Mode {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "untargeted" => Ok(Mode::Untargeted),
            "targeted" => Ok(Mode::Targeted),
            other => Err(Error::config(format!("unknown mode '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Untargeted => "untargeted",
            Mode::Targeted => "targeted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    Pure,
    Mixed,
}

impl Pipeline {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "pure" => Ok(Pipeline::Pure),
            "mixed" => Ok(Pipeline::Mixed),
            other => Err(Error::config(format!("unknown pipeline '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Pure => "pure",
            Pipeline::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Debug)]
pub enum DataSource {
    /// Generated disc-pattern dataset: class count, per-class count, side.
    Synthetic { classes: usize, per_class: usize, side: usize },
    Idx { images: PathBuf, labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
    CifarBinary { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub profile: DatasetProfile,
    pub profile_name: String,
    pub source: DataSource,
    pub train_count: usize,
    pub test_count: usize,
    pub eval_count: usize,
    pub preset: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub variants: Vec<Variant>,
    pub attacks: Vec<Family>,
    pub modes: Vec<Mode>,
    pub pipelines: Vec<Pipeline>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub map_grid: usize,
    pub orth_mode: String,
    pub penalty_iterations: Option<usize>,
    /// Cap on the mixed-pipeline seed pool; 0 means the attacker starts
    /// from the entire training set.
    pub blackbox_seed_count: usize,
}

fn parse_list<T>(raw: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<&str> = raw.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::config(format!("empty list '{}'", raw)));
    }
    items.into_iter().map(parse).collect()
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let profile_name = raw.parse_or("dataset", "profile", "synthetic".to_string())?;
        let profile = DatasetProfile::parse(&profile_name)?;
        let kind = raw.parse_or("dataset", "source", "synthetic".to_string())?;
        let source = match kind.as_str() {
            "synthetic" => DataSource::Synthetic {
                classes: raw.parse_or("dataset", "classes", 2usize)?,
                per_class: raw.parse_or("dataset", "per_class", 4500usize)?,
                side: raw.parse_or("dataset", "side", 12usize)?,
            },
            "idx" => DataSource::Idx {
                images: PathBuf::from(raw.require("dataset", "train_images")?),
                labels: PathBuf::from(raw.require("dataset", "train_labels")?),
                test_images: PathBuf::from(raw.require("dataset", "test_images")?),
                test_labels: PathBuf::from(raw.require("dataset", "test_labels")?),
            },
            "cifar-binary" => DataSource::CifarBinary {
                train: PathBuf::from(raw.require("dataset", "train_file")?),
                test: PathBuf::from(raw.require("dataset", "test_file")?),
            },
            other => return Err(Error::config(format!("unknown dataset source '{}'", other))),
        };
        let variants = parse_list(
            &raw.parse_or("defense", "variants", "buzz-1".to_string())?,
            Variant::parse,
        )?;
        let attacks = parse_list(
            &raw.parse_or("attack", "families", "fgsm".to_string())?,
            Family::parse,
        )?;
        let modes = parse_list(
            &raw.parse_or("attack", "modes", "untargeted".to_string())?,
            Mode::parse,
        )?;
        let pipelines = parse_list(
            &raw.parse_or("attack", "pipelines", "mixed".to_string())?,
            Pipeline::parse,
        )?;
        let penalty_iterations = match raw.get("attack", "penalty_iterations") {
            None => None,
            Some(v) => Some(v.parse().map_err(|_| {
                Error::config(format!("bad value '{}' for key 'penalty_iterations'", v))
            })?),
        };
        Ok(ExperimentConfig {
            profile,
            profile_name,
            source,
            train_count: raw.parse_or("dataset", "train_count", 8000usize)?,
            test_count: raw.parse_or("dataset", "test_count", 1000usize)?,
            eval_count: raw.parse_or("dataset", "eval_count", 100usize)?,
            preset: raw.parse_or("network", "preset", "small".to_string())?,
            epochs: raw.parse_or("network", "epochs", 10usize)?,
            batch_size: raw.parse_or("network", "batch_size", 64usize)?,
            learning_rate: raw.parse_or("network", "learning_rate", 1e-3f64)?,
            variants,
            attacks,
            modes,
            pipelines,
            seed: raw.parse_or("run", "seed", 0u64)?,
            out_dir: PathBuf::from(raw.parse_or("run", "out", "out".to_string())?),
            map_grid: raw.parse_or("map", "grid", 101usize)?,
            orth_mode: raw.parse_or("map", "orth", "gradient".to_string())?,
            penalty_iterations,
            blackbox_seed_count: raw.parse_or("attack", "seed_count", 0usize)?,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_raw(&RawConfig::from_file(path)?)
    }
}
