//! Binary checkpoint persistence.
//!
//! Layout, in order, with no padding anywhere:
//!
//! | bytes | content                                          |
//! |-------|--------------------------------------------------|
//! | 4     | magic `PCLP`                                     |
//! | 4     | format version, little-endian u32 (currently 1)  |
//! | 8     | metadata length `n`, little-endian u64           |
//! | n     | UTF-8 JSON metadata                              |
//! | rest  | each array as little-endian `f32`, manifest order|
//!
//! The metadata carries the training config, frozen preprocessing
//! statistics, every encoder config, the recorded best validation losses,
//! and an array manifest (name + shape, in file order). Arrays are stored at
//! `f32` precision; a model whose parameters already sit on the `f32` grid
//! (as [`crate::train::train_full`] guarantees) round-trips bit-exactly:
//! save → load → save reproduces the file byte for byte.
//!
//! A phase-1-only checkpoint simply has an empty tabular section; loading it
//! exposes the image and label encoders and reports every tabular modality
//! as absent.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PreprocessStats;
use crate::encoder::{init_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::train::{TrainConfig, TrainedModel};

/// File magic.
pub const MAGIC: [u8; 4] = *b"PCLP";
/// Newest format version this build writes and reads.
pub const VERSION: u32 = 1;

/// A trained model in persistable form.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub stats: PreprocessStats,
    pub image: EncoderParams,
    pub label: EncoderParams,
    /// `(modality name, encoder)` in storage order; empty for a
    /// phase-1-only checkpoint.
    pub tabular: Vec<(String, EncoderParams)>,
    /// Phase-1 validation loss of the stored snapshot, computed at storage
    /// precision (reloading and recomputing reproduces it exactly).
    pub best_val: f64,
    /// Phase-1 epoch of the stored snapshot (0 = initialization).
    pub best_epoch: usize,
    /// Per-modality phase-2 validation losses at storage precision.
    pub modality_val: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct NamedConfig {
    name: String,
    config: EncoderConfig,
}

#[derive(Serialize, Deserialize)]
struct NamedLoss {
    name: String,
    val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    train_config: TrainConfig,
    stats: PreprocessStats,
    image_config: EncoderConfig,
    label_config: EncoderConfig,
    tabular_configs: Vec<NamedConfig>,
    best_val: f64,
    best_epoch: usize,
    modality_val: Vec<NamedLoss>,
    arrays: Vec<ArrayInfo>,
}

/// The arrays of one checkpoint in file order: `(qualified name, matrix)`.
/// `param_names()` and `params()` enumerate in the same order, so zipping
/// them is sound.
fn array_list(ckpt: &Checkpoint) -> Vec<(String, &Matrix)> {
    let mut sections: Vec<(String, &EncoderParams)> = vec![
        ("image".to_string(), &ckpt.image),
        ("label".to_string(), &ckpt.label),
    ];
    for (name, params) in &ckpt.tabular {
        sections.push((format!("tabular.{name}"), params));
    }
    let mut arrays = Vec::new();
    for (prefix, params) in sections {
        for (name, m) in params.param_names().into_iter().zip(params.params()) {
            arrays.push((format!("{prefix}.{name}"), m));
        }
    }
    arrays
}

impl Checkpoint {
    /// Package a trained model.
    pub fn from_model(model: &TrainedModel) -> Checkpoint {
        Checkpoint {
            train_config: model.train_config.clone(),
            stats: model.stats.clone(),
            image: model.image.clone(),
            label: model.label.clone(),
            tabular: model.tabular.clone(),
            best_val: model.best_val,
            best_epoch: model.best_epoch,
            modality_val: model.modality_val.clone(),
        }
    }

    /// Whether a tabular encoder for `name` is present.
    pub fn has_modality(&self, name: &str) -> bool {
        self.tabular.iter().any(|(n, _)| n == name)
    }

    /// Names of the stored tabular modalities, in storage order.
    pub fn modality_names(&self) -> Vec<String> {
        self.tabular.iter().map(|(n, _)| n.clone()).collect()
    }

    /// The tabular encoder for `name`, or an error listing what exists.
    pub fn tabular_params(&self, name: &str) -> Result<&EncoderParams> {
        self.tabular
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::UnknownModality {
                name: name.to_string(),
                available: self.modality_names().join(", "),
            })
    }

    /// Serialize to the documented byte format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = array_list(self);
        let meta = Metadata {
            train_config: self.train_config.clone(),
            stats: self.stats.clone(),
            image_config: self.image.config.clone(),
            label_config: self.label.config.clone(),
            tabular_configs: self
                .tabular
                .iter()
                .map(|(name, p)| NamedConfig { name: name.clone(), config: p.config.clone() })
                .collect(),
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            modality_val: self
                .modality_val
                .iter()
                .map(|(name, v)| NamedLoss { name: name.clone(), val_loss: *v })
                .collect(),
            arrays: arrays
                .iter()
                .map(|(name, m)| ArrayInfo { name: name.clone(), rows: m.rows(), cols: m.cols() })
                .collect(),
        };
        let meta_json = serde_json::to_vec(&meta)?;
        let payload: usize = arrays.iter().map(|(_, m)| 4 * m.rows() * m.cols()).sum();
        let mut bytes = Vec::with_capacity(16 + meta_json.len() + payload);
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&meta_json);
        for (_, m) in &arrays {
            for &x in m.data() {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(bytes)
    }

    /// Parse the documented byte format, validating magic, version, length,
    /// and the array manifest against the embedded encoder configs.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 {
            return Err(Error::Checkpoint(format!(
                "file too short to be a checkpoint: {} bytes, header alone needs 16",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?} (`PCLP`)",
                &bytes[0..4],
                MAGIC
            )));
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build supports {VERSION}"
            )));
        }
        let meta_len = u64::from_le_bytes([
            bytes[8], bytes[9], bytes[10], bytes[11], bytes[12], bytes[13], bytes[14], bytes[15],
        ]);
        let meta_len: usize = meta_len
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("metadata length {meta_len} overflows")))?;
        let body_start = 16usize.checked_add(meta_len).ok_or_else(|| {
            Error::Checkpoint(format!("metadata length {meta_len} overflows"))
        })?;
        if bytes.len() < body_start {
            return Err(Error::Checkpoint(format!(
                "truncated metadata: expected {body_start} header+metadata bytes, got {}",
                bytes.len()
            )));
        }
        let meta: Metadata = serde_json::from_slice(&bytes[16..body_start])?;

        let expected_payload: usize = meta.arrays.iter().map(|a| 4 * a.rows * a.cols).sum();
        let expected_total = body_start + expected_payload;
        if bytes.len() < expected_total {
            return Err(Error::Checkpoint(format!(
                "truncated arrays: expected {expected_total} bytes, got {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected_total {
            return Err(Error::Checkpoint(format!(
                "trailing bytes after arrays: expected {expected_total} bytes, got {}",
                bytes.len()
            )));
        }

        // Rebuild each encoder at its config's shapes, then overwrite every
        // parameter from the file, cross-checking the manifest as we go.
        let mut cursor = body_start;
        let mut manifest = meta.arrays.iter();
        let mut fill = |prefix: String, params: &mut EncoderParams| -> Result<()> {
            let names = params.param_names();
            for (name, slot) in names.into_iter().zip(params.params_mut()) {
                let qualified = format!("{prefix}.{name}");
                let info = manifest.next().ok_or_else(|| {
                    Error::Checkpoint(format!("array manifest ended before `{qualified}`"))
                })?;
                if info.name != qualified {
                    return Err(Error::Checkpoint(format!(
                        "array manifest mismatch: expected `{qualified}`, found `{}`",
                        info.name
                    )));
                }
                if (info.rows, info.cols) != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "array `{qualified}` has shape {}x{} in the manifest but the config implies {}x{}",
                        info.rows,
                        info.cols,
                        slot.rows(),
                        slot.cols()
                    )));
                }
                let count = info.rows * info.cols;
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    let chunk = [bytes[cursor], bytes[cursor + 1], bytes[cursor + 2], bytes[cursor + 3]];
                    data.push(f64::from(f32::from_le_bytes(chunk)));
                    cursor += 4;
                }
                *slot = Matrix::new(info.rows, info.cols, data);
            }
            Ok(())
        };

        let mut image = init_params(&meta.image_config)?;
        fill("image".to_string(), &mut image)?;
        let mut label = init_params(&meta.label_config)?;
        fill("label".to_string(), &mut label)?;
        let mut tabular = Vec::with_capacity(meta.tabular_configs.len());
        for nc in &meta.tabular_configs {
            let mut params = init_params(&nc.config)?;
            fill(format!("tabular.{}", nc.name), &mut params)?;
            tabular.push((nc.name.clone(), params));
        }
        if let Some(stray) = manifest.next() {
            return Err(Error::Checkpoint(format!(
                "array manifest lists `{}` but no encoder expects it",
                stray.name
            )));
        }

        Ok(Checkpoint {
            train_config: meta.train_config,
            stats: meta.stats,
            image,
            label,
            tabular,
            best_val: meta.best_val,
            best_epoch: meta.best_epoch,
            modality_val: meta.modality_val.into_iter().map(|nl| (nl.name, nl.val_loss)).collect(),
        })
    }

    /// Write to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Read from `path`.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read checkpoint `{}`: {e}", path.display()))
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}
