//! Experiment configuration: JSON schema, presets and `key=value` overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use lfme_core::domains::{generate_suite, load_csv_suite, CsvOptions, Suite, SuiteSpec};
use lfme_core::train::{MethodKind, MethodSpec, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

/// Where the domains come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SuiteSource {
    /// Generated per seed; the run seed is added to `seed`.
    Synthetic(SuiteSpec),
    Csv { paths: Vec<PathBuf>, options: CsvOptions },
}

/// Training hyper-parameters shared by every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_per_domain: usize,
    pub eval_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let c = TrainConfig::new(MethodSpec::new(MethodKind::Erm));
        TrainSettings {
            optimizer: c.optimizer,
            lr: c.lr,
            weight_decay: c.weight_decay,
            steps: c.steps,
            batch_per_domain: c.batch_per_domain,
            eval_every: c.eval_every,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, method: MethodSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            optimizer: self.optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            steps: self.steps,
            batch_per_domain: self.batch_per_domain,
            seed,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Markdown, ReportFormat::Csv]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: SuiteSource,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub train: TrainSettings,
    pub seeds: Vec<u64>,
    /// Domains to hold out in turn; every domain when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out: Option<Vec<usize>>,
    pub output: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
}

/// Methods of the full comparison preset.
pub const FULL_COMPARISON_METHODS: [MethodKind; 15] = [
    MethodKind::Erm,
    MethodKind::Lfme,
    MethodKind::ErmPlus,
    MethodKind::Ls,
    MethodKind::KdZz,
    MethodKind::KdQz,
    MethodKind::KdQq,
    MethodKind::KdCe,
    MethodKind::AggAvg,
    MethodKind::AggMs,
    MethodKind::AggConf,
    MethodKind::AggDyn,
    MethodKind::SelfGuid,
    MethodKind::ErmpWExpt,
    MethodKind::ErmpWSelf,
];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-tables" => Ok(ExperimentConfig {
                suite: SuiteSource::Synthetic(SuiteSpec::default()),
                methods: FULL_COMPARISON_METHODS.iter().map(|&k| MethodSpec::new(k)).collect(),
                train: TrainSettings::default(),
                seeds: (0..10).collect(),
                held_out: None,
                output: PathBuf::from("runs/paper-tables"),
                formats: default_formats(),
            }),
            other => Err(CliError::Validation(format!(
                "unknown preset {other:?} (available: paper-tables)"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Validation(format!("config field `{}`: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets one dotted key (`train.steps`, `methods.0.alpha_half`) to a value.
    ///
    /// The value is parsed as JSON first and taken as a plain string otherwise.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let last = i + 1 == parts.len();
            slot = match slot {
                Value::Object(map) => {
                    if !map.contains_key(*part) && !last {
                        return Err(CliError::Validation(format!("unknown config key `{key}`")));
                    }
                    map.entry(part.to_string()).or_insert(Value::Null)
                }
                Value::Array(items) => {
                    let idx: usize = part
                        .parse()
                        .map_err(|_| CliError::Validation(format!("`{key}`: {part:?} is not an index")))?;
                    items
                        .get_mut(idx)
                        .ok_or_else(|| CliError::Validation(format!("`{key}`: index {idx} out of range")))?
                }
                _ => return Err(CliError::Validation(format!("unknown config key `{key}`"))),
            };
        }
        *slot = value;
        *self = serde_path_to_error::deserialize(doc)
            .map_err(|e| CliError::Validation(format!("--set {key}: field `{}`: {}", e.path(), e.inner())))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(CliError::Validation(format!("{field}: {msg}")));
        if self.methods.is_empty() {
            return bad("methods", "at least one method is required".into());
        }
        let mut tags = BTreeSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            if let Err(e) = m.validate() {
                return bad(&format!("methods[{i}]"), e.to_string());
            }
            if !tags.insert(m.tag()) {
                return bad(&format!("methods[{i}]"), format!("duplicate method {}", m.tag()));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct".into());
        }
        if let Err(e) = self.train.to_config(self.methods[0].clone(), 0).validate() {
            return bad("train", e.to_string());
        }
        match &self.suite {
            SuiteSource::Synthetic(spec) => {
                if let Err(e) = spec.validate() {
                    return bad("suite.synthetic", e.to_string());
                }
                if let Some(ids) = &self.held_out {
                    if let Some(id) = ids.iter().find(|&&id| id > spec.num_sources) {
                        return bad("held_out", format!("no domain {id} in a {}-domain suite", spec.num_sources + 1));
                    }
                }
            }
            SuiteSource::Csv { paths, .. } => {
                if paths.is_empty() {
                    return bad("suite.csv.paths", "at least one file is required".into());
                }
            }
        }
        if let Some(ids) = &self.held_out {
            if ids.is_empty() {
                return bad("held_out", "empty list; omit the key to hold out every domain".into());
            }
            if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
                return bad("held_out", "domain ids must be distinct".into());
            }
        }
        if self.formats.is_empty() {
            return bad("formats", "at least one report format is required".into());
        }
        if self.output.as_os_str().is_empty() {
            return bad("output", "empty path".into());
        }
        if self.output.is_file() {
            return bad("output", format!("{} is a file", self.output.display()));
        }
        Ok(())
    }

    /// The suite a given run seed trains on.
    pub fn load_suite(&self, seed: u64) -> Result<Suite> {
        match &self.suite {
            SuiteSource::Synthetic(spec) => {
                let mut spec = spec.clone();
                spec.seed = spec.seed.wrapping_add(seed);
                Ok(generate_suite(&spec)?)
            }
            SuiteSource::Csv { paths, options } => Ok(load_csv_suite(paths, options)?),
        }
    }

    /// Held-out domain ids in ascending order.
    pub fn held_out_ids(&self, suite: &Suite) -> Result<Vec<usize>> {
        let all: BTreeSet<usize> = suite.domains.iter().map(|d| d.domain_id).collect();
        match &self.held_out {
            None => Ok(all.into_iter().collect()),
            Some(ids) => {
                if let Some(id) = ids.iter().find(|id| !all.contains(id)) {
                    return Err(CliError::Validation(format!("held_out: no domain {id} in the suite")));
                }
                let mut ids = ids.clone();
                ids.sort_unstable();
                Ok(ids)
            }
        }
    }
}

/// Parses `LFME_SEED`-style seed lists: `3`, `0,1,2` or `0..10`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let err = || CliError::Validation(format!("bad seed list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| err())?;
        let b: u64 = b.trim().parse().map_err(|_| err())?;
        if a >= b {
            return Err(err());
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| err()))
        .collect()
}
