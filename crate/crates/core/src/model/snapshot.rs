//! Frozen model copies and their on-disk form.
//!
//! A snapshot directory holds `manifest.json` and `weights.bin`. The weights
//! blob is `b"CITW"`, a little-endian `u32` header length, a JSON header with
//! the architecture and class ids, then every parameter as little-endian `f64`
//! in [`Parameters`] visit order.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CitModel, LogitBundle, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::schedule::ClassId;
use crate::synthdata::{generate_range, SynthConfig};

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

const WEIGHTS_MAGIC: &[u8; 4] = b"CITW";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub task_index: usize,
    pub owned_class_ids: Vec<ClassId>,
    pub hyperparams: serde_json::Value,
    pub format_version: u32,
    pub probe_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsHeader {
    config: ModelConfig,
    class_ids: Vec<ClassId>,
    num_params: usize,
}

/// Fixed images used to fingerprint a model's evaluation-mode outputs.
pub fn probe_images() -> Vec<Array3<f32>> {
    let config = SynthConfig {
        image_size: 32,
        seed: 0x5EED_0F_C17,
        ..SynthConfig::default()
    };
    generate_range(&config, 0, 2).into_iter().map(|s| s.image).collect()
}

fn bundle_digest(bundles: &[LogitBundle]) -> String {
    let mut hasher = Sha256::new();
    for b in bundles {
        hasher.update(&b.class_ids);
        for v in b.presence_logits.iter().chain(b.mask_logits.iter()) {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Digest of the model's logits on [`probe_images`].
pub fn probe_digest(model: &CitModel) -> Result<String> {
    let bundles = probe_images()
        .iter()
        .map(|img| model.forward(img))
        .collect::<Result<Vec<_>>>()?;
    Ok(bundle_digest(&bundles))
}

/// Immutable model copy owned by one task.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    model: Arc<CitModel>,
    manifest: SnapshotManifest,
}

impl ModelSnapshot {
    pub fn capture(
        model: &CitModel,
        task_index: usize,
        owned_class_ids: Vec<ClassId>,
        hyperparams: serde_json::Value,
    ) -> Result<Self> {
        let manifest = SnapshotManifest {
            task_index,
            owned_class_ids,
            hyperparams,
            format_version: SNAPSHOT_FORMAT_VERSION,
            probe_digest: probe_digest(model)?,
        };
        Ok(Self {
            model: Arc::new(model.clone()),
            manifest,
        })
    }

    pub fn task_index(&self) -> usize {
        self.manifest.task_index
    }

    pub fn owned_class_ids(&self) -> &[ClassId] {
        &self.manifest.owned_class_ids
    }

    pub fn manifest(&self) -> &SnapshotManifest {
        &self.manifest
    }

    pub fn model(&self) -> &CitModel {
        &self.model
    }

    /// Fresh trainable copy of the frozen parameters.
    pub fn restore(&self) -> CitModel {
        (*self.model).clone()
    }

    pub fn forward(&self, image: &Array3<f32>) -> Result<LogitBundle> {
        self.model.forward(image)
    }

    pub fn param_digest(&self) -> String {
        self.model.param_digest()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

        let header = serde_json::to_vec(&WeightsHeader {
            config: self.model.config(),
            class_ids: self.model.bank.class_ids.clone(),
            num_params: self.model.num_params(),
        })?;
        let mut blob = Vec::with_capacity(8 + header.len() + 8 * self.model.num_params());
        blob.extend_from_slice(WEIGHTS_MAGIC);
        blob.extend_from_slice(&(header.len() as u32).to_le_bytes());
        blob.extend_from_slice(&header);
        self.model.visit(&mut |p| {
            for v in p {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        });
        let weights_path = dir.join("weights.bin");
        fs::write(&weights_path, blob).map_err(|e| Error::io(&weights_path, e))
    }

    /// Loads a snapshot directory, rejecting unknown format versions and
    /// weights whose probe outputs disagree with the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: SnapshotManifest =
            serde_json::from_str(&text).map_err(|e| Error::Snapshot(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::Snapshot(format!(
                "format_version {} is not supported (expected {SNAPSHOT_FORMAT_VERSION})",
                manifest.format_version
            )));
        }

        let weights_path = dir.join("weights.bin");
        let blob = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        let model = decode_weights(&blob)?;
        let digest = probe_digest(&model)?;
        if digest != manifest.probe_digest {
            return Err(Error::Snapshot(format!(
                "probe digest {digest} does not match manifest {}",
                manifest.probe_digest
            )));
        }
        Ok(Self {
            model: Arc::new(model),
            manifest,
        })
    }
}

fn decode_weights(blob: &[u8]) -> Result<CitModel> {
    let bad = |msg: &str| Error::Snapshot(format!("weights blob: {msg}"));
    if blob.len() < 8 || &blob[..4] != WEIGHTS_MAGIC {
        return Err(bad("missing magic"));
    }
    let header_len = u32::from_le_bytes(blob[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8 + header_len;
    if blob.len() < header_end {
        return Err(bad("truncated header"));
    }
    let header: WeightsHeader = serde_json::from_slice(&blob[8..header_end]).map_err(|e| bad(&e.to_string()))?;

    // Parameter values are overwritten below; the seed only fixes shapes.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = CitModel::new(&header.config, header.class_ids, &mut rng)?;
    if model.num_params() != header.num_params {
        return Err(bad("parameter count disagrees with architecture"));
    }
    let body = &blob[header_end..];
    if body.len() != 8 * header.num_params {
        return Err(bad("parameter payload has the wrong length"));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    model.load_flat(&flat);
    Ok(model)
}
