//! Checkpoints: `<stem>-phi.{json,bin}` for the proposal parameters and,
//! for the DMM, `<stem>-theta.{json,bin}` for the decoder. The phi manifest
//! carries the model kind, step, hyperparameters and resolved config.

use std::fs;
use std::path::{Path, PathBuf};

use apg_core::ParamStore;
use serde_json::{json, Map, Value};

use crate::config::{ExperimentConfig, ModelKind};
use crate::error::{HarnessError, Result};

pub const LATEST: &str = "latest.txt";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub step: u64,
    pub hyper: Value,
    pub config: ExperimentConfig,
    pub phi: ParamStore,
    pub theta: Option<ParamStore>,
}

pub fn stem_for(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt-{step:07}"))
}

fn part(stem: &Path, which: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(format!("-{which}"));
    PathBuf::from(s)
}

impl Checkpoint {
    /// Writes the checkpoint and points `latest.txt` in its directory at it.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut meta = Map::new();
        meta.insert("model".into(), json!(self.model));
        meta.insert("step".into(), json!(self.step));
        meta.insert("hyper".into(), self.hyper.clone());
        meta.insert("config".into(), json!(self.config.to_toml()));
        self.phi.save(&part(stem, "phi"), meta)?;
        if let Some(theta) = &self.theta {
            theta.save(&part(stem, "theta"), Map::new())?;
        }
        if let (Some(dir), Some(name)) = (stem.parent(), stem.file_name()) {
            fs::write(dir.join(LATEST), name.to_string_lossy().as_bytes())?;
        }
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (phi, manifest) = ParamStore::load(&part(stem, "phi"))?;
        let meta = &manifest.meta;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| HarnessError::Config(format!("{}: missing `{k}`", stem.display())));
        let model: ModelKind = serde_json::from_value(field("model")?).map_err(|e| HarnessError::Config(e.to_string()))?;
        let step = field("step")?.as_u64().ok_or_else(|| HarnessError::Config("checkpoint step is not an integer".into()))?;
        let config_text = field("config")?;
        let config = ExperimentConfig::resolve(config_text.as_str().unwrap_or_default(), &[])?;
        if config.model != model {
            return Err(HarnessError::Config("checkpoint model disagrees with its config".into()));
        }
        let theta = match model {
            ModelKind::Gmm => None,
            ModelKind::Dmm => Some(ParamStore::load(&part(stem, "theta"))?.0),
        };
        Ok(Self { model, step, hyper: field("hyper")?, config, phi, theta })
    }

    /// Reads `latest.txt` in `dir` and loads the checkpoint it names.
    pub fn latest(dir: &Path) -> Result<(PathBuf, Self)> {
        let name = fs::read_to_string(dir.join(LATEST)).map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))?;
        let stem = dir.join(name.trim());
        let ck = Self::load(&stem)?;
        Ok((stem, ck))
    }

    pub fn hyper_as<H: for<'de> serde::Deserialize<'de>>(&self) -> Result<H> {
        serde_json::from_value(self.hyper.clone()).map_err(|e| HarnessError::Config(format!("checkpoint hyperparameters: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use apg_core::gmm::{GmmHyper, GmmNets};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::Profile;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let hyper = GmmHyper::default();
        let nets = GmmNets::new(hyper.m).unwrap();
        let mut phi = ParamStore::new();
        nets.init(&mut phi, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let config = ExperimentConfig::profile(ModelKind::Gmm, Profile::Desk);
        let ck = Checkpoint { model: ModelKind::Gmm, step: 42, hyper: json!(hyper), config: config.clone(), phi, theta: None };
        let stem = stem_for(dir.path(), 42);
        ck.save(&stem).unwrap();
        let (found, back) = Checkpoint::latest(dir.path()).unwrap();
        assert_eq!(found, stem);
        assert_eq!((back.step, back.model), (42, ModelKind::Gmm));
        assert_eq!(back.phi, ck.phi);
        assert_eq!(back.config, config);
        assert_eq!(back.hyper_as::<GmmHyper>().unwrap(), hyper);
    }

    #[test]
    fn missing_checkpoints_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(HarnessError::Config(_))));
        assert!(matches!(Checkpoint::latest(dir.path()), Err(HarnessError::Config(_))));
    }
}
