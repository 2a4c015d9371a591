//! Artifact files: a JSON manifest next to a raw little-endian tensor blob.
//!
//! `name.json` describes the tensors stored in `name.bin`; the artifact's
//! identity is the SHA-256 of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use factlab_tensor::io::{read_tensor, write_blob, TensorEntry};
use factlab_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};

pub const FORMAT: &str = "factlab-artifact-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub format: String,
    pub kind: String,
    pub blob: String,
    pub blob_sha256: String,
    /// Hash of the artifact this one was derived from.
    pub parent: Option<String>,
    /// Effective run configuration at creation time.
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl ArtifactManifest {
    pub fn hash(&self) -> &str {
        &self.blob_sha256
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

#[allow(clippy::too_many_arguments)]
pub fn write_artifact<'a, F: Real>(
    path: &Path,
    kind: &str,
    parent: Option<String>,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<F>)>,
) -> Result<ArtifactManifest> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (blob, entries) = write_blob(tensors);
    let bin = blob_path(path);
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let manifest = ArtifactManifest {
        format: FORMAT.to_string(),
        kind: kind.to_string(),
        blob: bin.file_name().unwrap().to_string_lossy().into_owned(),
        blob_sha256: sha256_hex(&blob),
        parent,
        config,
        meta,
        tensors: entries,
    };
    write_json(path, &manifest)?;
    Ok(manifest)
}

pub fn read_artifact<F: Real>(path: &Path, kind: &str) -> Result<(ArtifactManifest, BTreeMap<String, Tensor<F>>)> {
    let manifest: ArtifactManifest = read_json(path)?;
    if manifest.format != FORMAT {
        return Err(Error::format(path, format!("unsupported format {:?}", manifest.format)));
    }
    if manifest.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a {kind} artifact, found {:?}", manifest.kind),
        ));
    }
    let bin = path.with_file_name(&manifest.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::format(&bin, "blob hash does not match manifest"));
    }
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        let t = read_tensor::<F>(&blob, entry).map_err(|e| Error::format(&bin, e))?;
        tensors.insert(entry.name.clone(), t);
    }
    Ok((manifest, tensors))
}

pub fn save_model<F: Real>(
    model: &Transformer<F>,
    path: &Path,
    parent: Option<String>,
    config: serde_json::Value,
) -> Result<ArtifactManifest> {
    let meta = serde_json::to_value(model.config()).expect("config serializes");
    write_artifact(path, "model", parent, config, meta, model.params().iter())
}

pub fn load_model<F: Real>(path: &Path) -> Result<(Transformer<F>, ArtifactManifest)> {
    let (manifest, tensors) = read_artifact::<F>(path, "model")?;
    let config: ModelConfig = serde_json::from_value(manifest.meta.clone()).map_err(|e| Error::format(path, e))?;
    Ok((Transformer::from_params(config, tensors)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 5,
            max_seq: 4,
            seed: 3,
        };
        let model = Transformer::<f32>::new(config).unwrap();
        let path = dir.path().join("m.json");
        let saved = save_model(&model, &path, Some("abc".into()), serde_json::json!({"k": 1})).unwrap();
        let (loaded, manifest) = load_model::<f32>(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(manifest, saved);
        assert_eq!(manifest.parent.as_deref(), Some("abc"));

        // Tampering with the blob is detected.
        let bin = blob_path(&path);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn corrupt_manifest_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(Error::Format { .. })));
    }
}
