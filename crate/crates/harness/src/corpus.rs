//! Corpus files: `<stem>.bin` holds little-endian f64 points
//! (instances × N × 2), `<stem>.json` the sidecar, and `<stem>.truth.jsonl`
//! one generating latent per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use apg_core::dmm::{self, DmmHyper, DmmInstance, DmmLatent};
use apg_core::gmm::{self, GmmHyper, GmmInstance, GmmLatent, DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelKind;
use crate::error::{HarnessError, Result};

pub const CORPUS_FORMAT: &str = "apg-corpus-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub model: ModelKind,
    pub seed: u64,
    pub instances: usize,
    pub n: usize,
    pub m: usize,
    pub hyper: serde_json::Value,
    /// How the points were produced; the DMM generator uses a fixed ring
    /// decoder in place of a learned one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Corpus {
    Gmm { hyper: GmmHyper, instances: Vec<GmmInstance> },
    Dmm { hyper: DmmHyper, instances: Vec<DmmInstance> },
}

impl Corpus {
    pub fn model(&self) -> ModelKind {
        match self {
            Corpus::Gmm { .. } => ModelKind::Gmm,
            Corpus::Dmm { .. } => ModelKind::Dmm,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Corpus::Gmm { instances, .. } => instances.len(),
            Corpus::Dmm { instances, .. } => instances.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn points(&self) -> Vec<&[[f64; DIM]]> {
        match self {
            Corpus::Gmm { instances, .. } => instances.iter().map(|i| i.points.as_slice()).collect(),
            Corpus::Dmm { instances, .. } => instances.iter().map(|i| i.points.as_slice()).collect(),
        }
    }

    pub fn gmm(self) -> Result<(GmmHyper, Vec<GmmInstance>)> {
        match self {
            Corpus::Gmm { hyper, instances } => Ok((hyper, instances)),
            _ => Err(HarnessError::Config("expected a GMM corpus".into())),
        }
    }

    pub fn dmm(self) -> Result<(DmmHyper, Vec<DmmInstance>)> {
        match self {
            Corpus::Dmm { hyper, instances } => Ok((hyper, instances)),
            _ => Err(HarnessError::Config("expected a DMM corpus".into())),
        }
    }
}

/// Draws `count` instances of `n` points with `m` clusters from the model's
/// prior, other hyperparameters at their defaults.
pub fn generate(model: ModelKind, count: usize, n: usize, m: usize, seed: u64) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match model {
        ModelKind::Gmm => {
            let hyper = GmmHyper { m, ..GmmHyper::default() };
            let instances = (0..count).map(|_| gmm::generate_instance(n, &hyper, &mut rng)).collect::<apg_core::Result<_>>()?;
            Corpus::Gmm { hyper, instances }
        }
        ModelKind::Dmm => {
            let hyper = DmmHyper { m, ..DmmHyper::default() };
            let instances = (0..count).map(|_| dmm::generate_instance(n, &hyper, &mut rng)).collect::<apg_core::Result<_>>()?;
            Corpus::Dmm { hyper, instances }
        }
    })
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write(corpus: &Corpus, stem: &Path, seed: u64) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let points = corpus.points();
    let n = points.first().map_or(0, |p| p.len());
    if points.iter().any(|p| p.len() != n) {
        return Err(HarnessError::Config("corpus instances must share N".into()));
    }
    let mut blob = Vec::with_capacity(points.len() * n * DIM * 8);
    for p in &points {
        for x in p.iter().flatten() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(with_suffix(stem, ".bin"), blob)?;
    let (m, hyper, generator, radius) = match corpus {
        Corpus::Gmm { hyper, .. } => (hyper.m, serde_json::to_value(hyper)?, None, None),
        Corpus::Dmm { hyper, .. } => (hyper.m, serde_json::to_value(hyper)?, Some("ring".to_string()), Some(hyper.radius)),
    };
    let sidecar = Sidecar {
        format: CORPUS_FORMAT.into(),
        model: corpus.model(),
        seed,
        instances: points.len(),
        n,
        m,
        hyper,
        generator,
        radius,
    };
    fs::write(with_suffix(stem, ".json"), serde_json::to_string_pretty(&sidecar)?)?;
    let mut truth = BufWriter::new(fs::File::create(with_suffix(stem, ".truth.jsonl"))?);
    match corpus {
        Corpus::Gmm { instances, .. } => write_latents(&mut truth, instances.iter().map(|i| i.truth.as_ref()))?,
        Corpus::Dmm { instances, .. } => write_latents(&mut truth, instances.iter().map(|i| i.truth.as_ref()))?,
    }
    truth.flush()?;
    Ok(())
}

/// One JSON latent per line; `null` where none is known.
pub fn write_latents<'a, L: Serialize + 'a>(out: &mut impl Write, latents: impl Iterator<Item = Option<&'a L>>) -> Result<()> {
    for z in latents {
        serde_json::to_writer(&mut *out, &z)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn read_latents<L: for<'de> Deserialize<'de>>(path: &Path, count: usize) -> Result<Vec<Option<L>>> {
    if !path.exists() {
        return Ok((0..count).map(|_| None).collect());
    }
    let lines: Vec<String> = BufReader::new(fs::File::open(path)?).lines().collect::<std::io::Result<_>>()?;
    if lines.len() != count {
        return Err(HarnessError::Config(format!("{}: {} latents for {count} instances", path.display(), lines.len())));
    }
    lines.iter().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn read(stem: &Path) -> Result<Corpus> {
    let cfg_err = |e: std::io::Error, p: PathBuf| HarnessError::Config(format!("{}: {e}", p.display()));
    let side_path = with_suffix(stem, ".json");
    let text = fs::read_to_string(&side_path).map_err(|e| cfg_err(e, side_path.clone()))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", side_path.display())))?;
    if side.format != CORPUS_FORMAT {
        return Err(HarnessError::Config(format!("unsupported corpus format `{}`", side.format)));
    }
    let bin_path = with_suffix(stem, ".bin");
    let blob = fs::read(&bin_path).map_err(|e| cfg_err(e, bin_path.clone()))?;
    if blob.len() != side.instances * side.n * DIM * 8 {
        return Err(HarnessError::Config(format!("{}: expected {} instances of {} points", bin_path.display(), side.instances, side.n)));
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let points: Vec<Vec<[f64; DIM]>> = (0..side.instances)
        .map(|i| (0..side.n).map(|j| [values[(i * side.n + j) * DIM], values[(i * side.n + j) * DIM + 1]]).collect())
        .collect();
    let truth_path = with_suffix(stem, ".truth.jsonl");
    let bad = |e: serde_json::Error| HarnessError::Config(format!("sidecar hyperparameters: {e}"));
    Ok(match side.model {
        ModelKind::Gmm => {
            let hyper: GmmHyper = serde_json::from_value(side.hyper).map_err(bad)?;
            let truth: Vec<Option<GmmLatent>> = read_latents(&truth_path, side.instances)?;
            let instances = points.into_iter().zip(truth).map(|(points, truth)| GmmInstance { points, truth }).collect();
            Corpus::Gmm { hyper, instances }
        }
        ModelKind::Dmm => {
            let hyper: DmmHyper = serde_json::from_value(side.hyper).map_err(bad)?;
            let truth: Vec<Option<DmmLatent>> = read_latents(&truth_path, side.instances)?;
            let instances = points.into_iter().zip(truth).map(|(points, truth)| DmmInstance { points, truth }).collect();
            Corpus::Dmm { hyper, instances }
        }
    })
}
