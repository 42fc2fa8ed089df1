//! Experiment configuration: profile defaults, then the config file, then
//! `key=value` overrides, resolved into one frozen [`ExperimentConfig`].

use std::path::{Path, PathBuf};

use apg_core::hmc::HmcConfig;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gmm,
    Dmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Apg,
    Rws,
    Bpg,
    HmcRws,
    Gibbs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Apg => "apg",
            Method::Rws => "rws",
            Method::Bpg => "bpg",
            Method::HmcRws => "hmc-rws",
            Method::Gibbs => "gibbs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub profile: Profile,
    pub method: Method,
    pub seed: u64,
    /// Sweeps `K`, the first being importance sampling.
    pub sweeps: usize,
    pub particles: usize,
    pub batch: usize,
    pub lr: f64,
    pub steps: usize,
    pub checkpoint_every: usize,
    /// Training steps between metric rows; GMM rows also carry KLs.
    pub log_every: usize,
    pub kl_instances: usize,
    pub train_corpus: PathBuf,
    pub test_corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint stem to resume from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    pub hmc: HmcConfig,
}

impl ExperimentConfig {
    pub fn profile(model: ModelKind, profile: Profile) -> Self {
        let base = Self {
            model,
            profile,
            method: Method::Apg,
            seed: 0,
            sweeps: 5,
            particles: 10,
            batch: 20,
            lr: 2.5e-4,
            steps: 200_000,
            checkpoint_every: 10_000,
            log_every: 1_000,
            kl_instances: 50,
            train_corpus: PathBuf::from("corpus/train"),
            test_corpus: PathBuf::from("corpus/test"),
            out_dir: PathBuf::from("runs/default"),
            resume: None,
            hmc: HmcConfig::default(),
        };
        match (model, profile) {
            (ModelKind::Gmm, Profile::Paper) => base,
            (ModelKind::Gmm, Profile::Desk) => {
                Self { batch: 5, lr: 1e-3, steps: 20_000, checkpoint_every: 5_000, log_every: 500, ..base }
            }
            (ModelKind::Dmm, Profile::Paper) => {
                Self { sweeps: 8, lr: 1e-4, steps: 300_000, log_every: 1_000, kl_instances: 0, ..base }
            }
            (ModelKind::Dmm, Profile::Desk) => Self {
                sweeps: 5,
                batch: 2,
                lr: 1e-3,
                steps: 4_000,
                checkpoint_every: 1_000,
                log_every: 250,
                kl_instances: 0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.sweeps == 0 || self.particles == 0 {
            return bad("sweeps and particles must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.model == ModelKind::Dmm && self.method == Method::Gibbs {
            return bad("exact Gibbs kernels exist only for the GMM".into());
        }
        self.hmc.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Sample budget in log-joint evaluations per instance for the
    /// configured method, counting an HMC update as `LF` evaluations.
    pub fn budget(&self) -> usize {
        match self.method {
            Method::Rws => self.sweeps * self.particles,
            Method::HmcRws => self.particles * (1 + (self.sweeps - 1) * self.hmc.leapfrog_steps),
            _ => self.sweeps * self.particles,
        }
    }

    /// Resolves a config file and overrides over the profile it names.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| HarnessError::Config(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_literal(value.trim()))?;
        }
        let model: ModelKind = pick(&table, "model")?.unwrap_or(ModelKind::Gmm);
        let profile: Profile = pick(&table, "profile")?.unwrap_or(Profile::Desk);
        let mut merged = toml::Table::try_from(Self::profile(model, profile)).expect("config serializes");
        merge(&mut merged, table);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn pick<T: for<'de> Deserialize<'de>>(table: &toml::Table, key: &str) -> Result<Option<T>, HarnessError> {
    table
        .get(key)
        .map(|v| v.clone().try_into().map_err(|e: toml::de::Error| HarnessError::Config(format!("{key}: {e}"))))
        .transpose()
}

fn parse_literal(s: &str) -> toml::Value {
    format!("v = {s}").parse::<toml::Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| toml::Value::String(s.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), HarnessError> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry.as_table_mut().ok_or_else(|| HarnessError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    Err(HarnessError::Config("empty override key".into()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
