//! Checkpoint persistence: a `manifest.toml` describing the model plus a
//! `params.bin` of little-endian f32 values in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecArch, CodecModel, CodecTrainConfig};
use crate::dids::{DidsArch, DidsModel, DidsTrainConfig};
use crate::error::{Error, Result};
use crate::nn::layers::ParamSet;

const MANIFEST: &str = "manifest.toml";
const PARAMS: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DidsManifest {
    kind: String,
    arch: DidsArch,
    seed: u64,
    config_hash: String,
    train_cfg: Option<DidsTrainConfig>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodecManifest {
    kind: String,
    arch: CodecArch,
    seed: u64,
    config_hash: String,
    train_cfg: Option<CodecTrainConfig>,
    params: Vec<ParamEntry>,
}

/// Hex SHA-256 of a config's canonical TOML form.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let text = toml::to_string(cfg).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn param_entries(params: &ParamSet) -> Vec<ParamEntry> {
    let mut offset = 0usize;
    params
        .iter()
        .map(|(name, value)| {
            let entry = ParamEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                offset,
                len: value.len(),
            };
            offset += value.len();
            entry
        })
        .collect()
}

fn write_params_bin(dir: &Path, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::with_capacity(params.total_len() * 4);
    for (_, value) in params.iter() {
        for &v in value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(PARAMS), buf)?;
    Ok(())
}

fn read_params_bin(dir: &Path, entries: &[ParamEntry], params: &mut ParamSet) -> Result<()> {
    let mut raw = Vec::new();
    fs::File::open(dir.join(PARAMS))?.read_to_end(&mut raw)?;
    let total: usize = entries.iter().map(|e| e.len).sum();
    if raw.len() != total * 4 {
        return Err(Error::BadCheckpoint(format!(
            "params.bin holds {} bytes, manifest expects {}",
            raw.len(),
            total * 4
        )));
    }
    if entries.len() != params.len() {
        return Err(Error::BadCheckpoint(format!(
            "manifest lists {} tensors, model has {}",
            entries.len(),
            params.len()
        )));
    }
    for (i, entry) in entries.iter().enumerate() {
        if params.name(i) != entry.name {
            return Err(Error::BadCheckpoint(format!(
                "tensor {} is '{}' in the manifest but '{}' in the model",
                i,
                entry.name,
                params.name(i)
            )));
        }
        let value = params.value_mut(i);
        if value.shape() != entry.shape.as_slice() || value.len() != entry.len {
            return Err(Error::BadCheckpoint(format!(
                "tensor '{}' shape mismatch",
                entry.name
            )));
        }
        let start = entry.offset * 4;
        for (j, v) in value.iter_mut().enumerate() {
            let base = start + j * 4;
            let bytes: [u8; 4] = raw[base..base + 4].try_into().unwrap();
            *v = f32::from_le_bytes(bytes);
        }
    }
    Ok(())
}

/// Saves a channel model checkpoint directory.
pub fn save_dids<P: AsRef<Path>>(dir: P, model: &DidsModel) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = DidsManifest {
        kind: "dids".into(),
        arch: model.arch,
        seed: model.seed,
        config_hash: model
            .train_cfg
            .as_ref()
            .map(config_hash)
            .unwrap_or_default(),
        train_cfg: model.train_cfg.clone(),
        params: param_entries(&model.params),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::BadCheckpoint(format!("manifest serialization: {e}")))?;
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    f.write_all(text.as_bytes())?;
    write_params_bin(dir, &model.params)
}

/// Loads a channel model checkpoint directory.
pub fn load_dids<P: AsRef<Path>>(dir: P) -> Result<DidsModel> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: DidsManifest =
        toml::from_str(&text).map_err(|e| Error::BadCheckpoint(format!("manifest: {e}")))?;
    if manifest.kind != "dids" {
        return Err(Error::BadCheckpoint(format!(
            "expected a dids checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let mut model = DidsModel::new(manifest.arch, manifest.seed)?;
    read_params_bin(dir, &manifest.params, &mut model.params)?;
    model.train_cfg = manifest.train_cfg;
    Ok(model)
}

/// Saves a codec checkpoint directory.
pub fn save_codec<P: AsRef<Path>>(
    dir: P,
    model: &CodecModel,
    train_cfg: Option<&CodecTrainConfig>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = CodecManifest {
        kind: "codec".into(),
        arch: model.arch,
        seed: model.seed,
        config_hash: train_cfg.map(config_hash).unwrap_or_default(),
        train_cfg: train_cfg.cloned(),
        params: param_entries(&model.params),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::BadCheckpoint(format!("manifest serialization: {e}")))?;
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    f.write_all(text.as_bytes())?;
    write_params_bin(dir, &model.params)
}

/// Loads a codec checkpoint directory, returning the model and the
/// training config it was saved with, when present.
pub fn load_codec<P: AsRef<Path>>(dir: P) -> Result<(CodecModel, Option<CodecTrainConfig>)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: CodecManifest =
        toml::from_str(&text).map_err(|e| Error::BadCheckpoint(format!("manifest: {e}")))?;
    if manifest.kind != "codec" {
        return Err(Error::BadCheckpoint(format!(
            "expected a codec checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let mut model = CodecModel::new(manifest.arch, manifest.seed)?;
    read_params_bin(dir, &manifest.params, &mut model.params)?;
    Ok((model, manifest.train_cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{AuxPattern, CodecArch};
    use crate::dids::DidsArch;

    #[test]
    fn dids_roundtrip() {
        let arch = DidsArch {
            width: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 12,
        };
        let model = DidsModel::new(arch, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dids(dir.path(), &model).unwrap();
        let loaded = load_dids(dir.path()).unwrap();
        assert_eq!(loaded.params.fingerprint(), model.params.fingerprint());
        assert_eq!(loaded.arch, model.arch);
    }

    #[test]
    fn codec_roundtrip() {
        let arch = CodecArch {
            l_s: 4,
            l_c: 6,
            width: 16,
            heads: 2,
            layers: 1,
            aux: AuxPattern::I,
            max_len: 22,
        };
        let model = CodecModel::new(arch, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_codec(dir.path(), &model, None).unwrap();
        let (loaded, cfg) = load_codec(dir.path()).unwrap();
        assert!(cfg.is_none());
        assert_eq!(loaded.params.fingerprint(), model.params.fingerprint());
    }

    #[test]
    fn kind_mismatch_rejected() {
        let arch = DidsArch {
            width: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 12,
        };
        let model = DidsModel::new(arch, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dids(dir.path(), &model).unwrap();
        assert!(load_codec(dir.path()).is_err());
    }
}
