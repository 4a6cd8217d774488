//! Checkpoint directories and the in-memory model bundle.
//!
//! A checkpoint is a directory holding `meta.json` and one safetensors blob
//! per parameter set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::error::{io_err, validation, Error, Result};
use crate::nn::{Decoder, Denoiser, ImageClassifier, LatentAutoencoder, LatentClassifier, ParamStore};

pub const META_FILE: &str = "meta.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Stages whose artifacts this one was built from, in DAG order.
    pub provenance: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    /// Blob names, each stored as `<name>.safetensors`.
    pub blobs: Vec<String>,
}

impl CheckpointMeta {
    pub fn new(stage: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            metrics: BTreeMap::new(),
            provenance: Vec::new(),
            role: None,
            blobs: Vec::new(),
        }
    }
}

/// SHA-256 of the canonical JSON serialisation of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys sorted, which canonicalises field order
    let canonical = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(format!("{:x}", Sha256::digest(&canonical)))
}

pub fn write_checkpoint(dir: &Path, meta: &CheckpointMeta, blobs: &[(&str, &ParamStore)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut meta = meta.clone();
    meta.blobs = blobs.iter().map(|(n, _)| n.to_string()).collect();
    for (name, store) in blobs {
        store.save(&dir.join(format!("{name}.safetensors")))?;
    }
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&path))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(validation(format!(
            "{}: unsupported checkpoint format {}",
            path.display(),
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Loads blob `name` into an already constructed parameter set.
pub fn load_blob(dir: &Path, name: &str, store: &ParamStore) -> Result<()> {
    let path = dir.join(format!("{name}.safetensors"));
    if !path.exists() {
        return Err(validation(format!("checkpoint {} has no blob {name}", dir.display())));
    }
    store.load(&path)
}

/// The networks of one experiment with the stages that produced them.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub lae: Option<LatentAutoencoder>,
    /// D′; falls back to nothing, never silently to D.
    pub finetuned_decoder: Option<Decoder>,
    pub denoiser: Option<Denoiser>,
    pub schedule: NoiseSchedule,
    /// Side length of the square images the autoencoder works on.
    pub image_size: usize,
    pub latent_clf: Option<LatentClassifier>,
    pub aux_clf: Option<ImageClassifier>,
    pub stage_provenance: Vec<String>,
    pub config: serde_json::Value,
}

impl ModelBundle {
    pub fn new(schedule: NoiseSchedule, image_size: usize, config: serde_json::Value) -> Self {
        Self {
            lae: None,
            finetuned_decoder: None,
            denoiser: None,
            schedule,
            image_size,
            latent_clf: None,
            aux_clf: None,
            stage_provenance: Vec::new(),
            config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.finetuned_decoder.is_some() && (self.lae.is_none() || self.denoiser.is_none()) {
            return Err(validation("a fine-tuned decoder needs the autoencoder and denoiser it was built on"));
        }
        Ok(())
    }

    pub fn lae(&self) -> Result<&LatentAutoencoder> {
        self.lae.as_ref().ok_or_else(|| Error::Config("bundle has no autoencoder".into()))
    }

    pub fn denoiser(&self) -> Result<&Denoiser> {
        self.denoiser.as_ref().ok_or_else(|| Error::Config("bundle has no denoiser".into()))
    }

    pub fn latent_clf(&self) -> Result<&LatentClassifier> {
        self.latent_clf
            .as_ref()
            .ok_or_else(|| Error::Config("guided sampling needs a latent classifier".into()))
    }

    pub fn finetuned_decoder(&self) -> Result<&Decoder> {
        self.finetuned_decoder
            .as_ref()
            .ok_or_else(|| Error::Config("conditional decoding needs a fine-tuned decoder".into()))
    }

    pub fn record(&mut self, stage: &str) {
        if !self.stage_provenance.iter().any(|s| s == stage) {
            self.stage_provenance.push(stage.to_string());
        }
    }
}
