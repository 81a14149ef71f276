//! On-disk datasets and trained stacks.
//!
//! A dataset directory holds `images/NNNNN.png`, `curves/NNNNN.csv` and
//! `manifest.json`; a trained stack lives under `models/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::PolyBridge;
use crate::config::{PassCounts, RunConfig};
use crate::device::{
    sample_params, simulate_iv, IvCurve, LOG_CURRENT_FLOOR, LOG_CURRENT_SPAN,
};
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::pipeline::{curve_matrix, image_matrix, TrainedStack};
use crate::render::{render, DeviceImage};
use crate::vae::{ReconLoss, VaeModel, VaeOptimizer};
use crate::DeviceParams;

pub const DATASET_VERSION: u32 = 1;
pub const STACK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: usize,
    pub split: Split,
    pub params: DeviceParams,
    pub image: String,
    pub curve: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config_digest: String,
    pub n_train: usize,
    pub n_test: usize,
    pub items: Vec<ManifestItem>,
}

/// Dataset held in memory. Rows follow manifest order, training items first.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<DeviceImage>,
    pub curves: Vec<IvCurve>,
}

impl Dataset {
    /// Samples, renders and simulates `n_train + n_test` devices without
    /// touching the disk.
    pub fn build(n_train: usize, n_test: usize, seed: u64, config_digest: &str) -> Self {
        let params = sample_params(seed, n_train + n_test);
        let items = params
            .iter()
            .enumerate()
            .map(|(id, p)| ManifestItem {
                id,
                split: if id < n_train { Split::Train } else { Split::Test },
                params: *p,
                image: format!("images/{id:05}.png"),
                curve: format!("curves/{id:05}.csv"),
            })
            .collect();
        Self {
            manifest: DatasetManifest {
                version: DATASET_VERSION,
                seed,
                config_digest: config_digest.to_string(),
                n_train,
                n_test,
                items,
            },
            images: params.iter().map(render).collect(),
            curves: params.iter().map(simulate_iv).collect(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::build(cfg.dataset.n_train, cfg.dataset.n_test, cfg.seed, &cfg.digest())
    }

    pub fn len(&self) -> usize {
        self.manifest.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.items.is_empty()
    }

    pub fn params(&self) -> impl Iterator<Item = DeviceParams> + '_ {
        self.manifest.items.iter().map(|i| i.params)
    }

    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.manifest.n_train
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.manifest.n_train..self.len()
    }

    /// Image rows scaled to [0, 1].
    pub fn image_matrix(&self) -> Array2<f64> {
        image_matrix(&self.images)
    }

    /// Normalized curve rows.
    pub fn curve_matrix(&self) -> Array2<f64> {
        curve_matrix(&self.curves)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        for sub in ["images", "curves"] {
            let d = out_dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for ((item, img), curve) in self.manifest.items.iter().zip(&self.images).zip(&self.curves) {
            img.write_png(&out_dir.join(&item.image))?;
            curve.write_csv(&out_dir.join(&item.curve))?;
        }
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Builds the configured dataset and writes it under `out_dir`.
pub fn generate_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let data = Dataset::from_config(cfg);
    data.write(out_dir)?;
    Ok(data.manifest)
}

/// Reads a dataset directory, checking the manifest against the files.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::CorruptDataset {
        item: "manifest.json".into(),
        reason: e.to_string(),
    })?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: DATASET_VERSION,
        });
    }
    let corrupt = |item: String, reason: String| Error::CorruptDataset { item, reason };
    if manifest.items.len() != manifest.n_train + manifest.n_test {
        return Err(corrupt(
            "manifest.json".into(),
            format!(
                "{} items listed but n_train + n_test = {}",
                manifest.items.len(),
                manifest.n_train + manifest.n_test
            ),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    let mut images = Vec::with_capacity(manifest.items.len());
    let mut curves = Vec::with_capacity(manifest.items.len());
    for (pos, item) in manifest.items.iter().enumerate() {
        let name = format!("item {}", item.id);
        let expected_split = if pos < manifest.n_train { Split::Train } else { Split::Test };
        if item.id != pos || item.split != expected_split {
            return Err(corrupt(name, "ids or splits out of order".into()));
        }
        if !seen.insert(item.image.clone()) || !seen.insert(item.curve.clone()) {
            return Err(corrupt(name, "duplicate file name".into()));
        }
        item.params
            .validate()
            .map_err(|e| corrupt(name.clone(), e.to_string()))?;
        let img = DeviceImage::read_png(&dir.join(&item.image))
            .map_err(|e| corrupt(format!("{name} ({})", item.image), e.to_string()))?;
        let curve = IvCurve::read_csv(&dir.join(&item.curve))
            .map_err(|e| corrupt(format!("{name} ({})", item.curve), e.to_string()))?;
        images.push(img);
        curves.push(curve);
    }
    Ok(Dataset {
        manifest,
        images,
        curves,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VaeSidecar {
    latent_dim: usize,
    input_dim: usize,
    recon_loss: ReconLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Normalization {
    log_current_floor: f64,
    log_current_span: f64,
    image_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackManifest {
    version: u32,
    seed: u64,
    config_digest: String,
    passes: PassCounts,
    image_vae: VaeSidecar,
    curve_vae: VaeSidecar,
    normalization: Normalization,
    /// File name → hex SHA-256 for every other file in the tree.
    files: BTreeMap<String, String>,
}

/// Where a stack came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

const MODEL_FILES: [&str; 6] = [
    "image_encoder.ckpt",
    "image_decoder.ckpt",
    "curve_encoder.ckpt",
    "curve_decoder.ckpt",
    "fwd_bridge.json",
    "inv_bridge.json",
];

fn sidecar(m: &VaeModel) -> VaeSidecar {
    VaeSidecar {
        latent_dim: m.latent_dim,
        input_dim: m.input_dim,
        recon_loss: m.recon_loss,
    }
}

fn models_dir(dir: &Path) -> PathBuf {
    dir.join("models")
}

/// Writes the stack to `dir/models/`.
pub fn save_stack(stack: &TrainedStack, provenance: &Provenance, dir: &Path) -> Result<()> {
    stack.validate()?;
    let root = models_dir(dir);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let ckpt = |params: &crate::nn::NetParams, opt: Option<&crate::nn::AdamState>| Checkpoint {
        seed: provenance.seed,
        params: params.clone(),
        optimizer: opt.cloned(),
    };
    let io = stack.image_optimizer.as_ref();
    let co = stack.curve_optimizer.as_ref();
    let blobs: [Vec<u8>; 6] = [
        ckpt(&stack.image_vae.encoder, io.map(|o| &o.encoder)).to_bytes(),
        ckpt(&stack.image_vae.decoder, io.map(|o| &o.decoder)).to_bytes(),
        ckpt(&stack.curve_vae.encoder, co.map(|o| &o.encoder)).to_bytes(),
        ckpt(&stack.curve_vae.decoder, co.map(|o| &o.decoder)).to_bytes(),
        serde_json::to_vec(&stack.fwd_bridge).expect("bridge serializes"),
        serde_json::to_vec(&stack.inv_bridge).expect("bridge serializes"),
    ];
    let mut files = BTreeMap::new();
    for (name, blob) in MODEL_FILES.iter().zip(&blobs) {
        let path = root.join(name);
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;
        files.insert(name.to_string(), hex::encode(Sha256::digest(blob)));
    }
    let manifest = StackManifest {
        version: STACK_VERSION,
        seed: provenance.seed,
        config_digest: provenance.config_digest.clone(),
        passes: stack.passes,
        image_vae: sidecar(&stack.image_vae),
        curve_vae: sidecar(&stack.curve_vae),
        normalization: Normalization {
            log_current_floor: LOG_CURRENT_FLOOR,
            log_current_span: LOG_CURRENT_SPAN,
            image_scale: 255.0,
        },
        files,
    };
    let path = root.join("stack.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a stack written by [`save_stack`].
pub fn load_stack(dir: &Path) -> Result<(TrainedStack, Provenance)> {
    let root = models_dir(dir);
    let path = root.join("stack.json");
    let corrupt = |path: &Path, reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if let Some(v) = version {
        if v != u64::from(STACK_VERSION) {
            return Err(Error::VersionMismatch {
                found: v as u32,
                expected: STACK_VERSION,
            });
        }
    }
    let manifest: StackManifest =
        serde_json::from_value(value).map_err(|e| corrupt(&path, e.to_string()))?;
    if manifest.normalization.log_current_floor != LOG_CURRENT_FLOOR
        || manifest.normalization.log_current_span != LOG_CURRENT_SPAN
        || manifest.normalization.image_scale != 255.0
    {
        return Err(corrupt(&path, "normalization constants differ from this build".into()));
    }

    let mut blobs = Vec::with_capacity(MODEL_FILES.len());
    for name in MODEL_FILES {
        let p = root.join(name);
        let blob = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let expected = manifest
            .files
            .get(name)
            .ok_or_else(|| corrupt(&path, format!("no digest recorded for {name}")))?;
        if *expected != hex::encode(Sha256::digest(&blob)) {
            // Decode first so truncation and version bumps surface precisely.
            if name.ends_with(".ckpt") {
                Checkpoint::from_bytes(&blob, &p)?;
            }
            return Err(corrupt(&p, "contents do not match the recorded digest".into()));
        }
        blobs.push((p, blob));
    }
    let ckpt = |i: usize| Checkpoint::from_bytes(&blobs[i].1, &blobs[i].0);
    let bridge = |i: usize| -> Result<PolyBridge> {
        let b: PolyBridge =
            serde_json::from_slice(&blobs[i].1).map_err(|e| corrupt(&blobs[i].0, e.to_string()))?;
        b.validate().map_err(|e| corrupt(&blobs[i].0, e.to_string()))?;
        Ok(b)
    };
    let (ie, id, ce, cd) = (ckpt(0)?, ckpt(1)?, ckpt(2)?, ckpt(3)?);
    let optimizer = |e: &Checkpoint, d: &Checkpoint| match (&e.optimizer, &d.optimizer) {
        (Some(enc), Some(dec)) => Some(VaeOptimizer {
            encoder: enc.clone(),
            decoder: dec.clone(),
        }),
        _ => None,
    };
    let image_optimizer = optimizer(&ie, &id);
    let curve_optimizer = optimizer(&ce, &cd);
    let image_vae = VaeModel::from_parts(ie.params, id.params, manifest.image_vae.recon_loss)?;
    let curve_vae = VaeModel::from_parts(ce.params, cd.params, manifest.curve_vae.recon_loss)?;
    for (m, side) in [(&image_vae, &manifest.image_vae), (&curve_vae, &manifest.curve_vae)] {
        if sidecar(m) != *side {
            return Err(corrupt(&path, "VAE metadata does not match its checkpoints".into()));
        }
    }
    let stack = TrainedStack {
        image_vae,
        curve_vae,
        fwd_bridge: bridge(4)?,
        inv_bridge: bridge(5)?,
        passes: manifest.passes,
        image_optimizer,
        curve_optimizer,
    };
    stack.validate()?;
    Ok((
        stack,
        Provenance {
            seed: manifest.seed,
            config_digest: manifest.config_digest,
        },
    ))
}
