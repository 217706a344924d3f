//! Checkpoints are a pair of files: `<stem>.json`, a manifest describing the
//! architecture and every tensor, and `<stem>.bin`, the tensors' values as
//! little-endian floats concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::ImageShape;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: String,
    pub input_shape: ImageShape,
    pub num_classes: usize,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    /// Architecture-specific settings, training schedule, metrics.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn save<S: Scalar>(
    stem: &Path,
    architecture: &str,
    input_shape: ImageShape,
    num_classes: usize,
    store: &ParamStore<S>,
    extra: serde_json::Value,
) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut blob = Vec::with_capacity(store.iter().map(|(_, t)| t.len()).sum::<usize>() * S::BYTES);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        architecture: architecture.to_string(),
        input_shape,
        num_classes,
        dtype: S::DTYPE.to_string(),
        tensors,
        extra,
    };
    let mpath = manifest_path(stem);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&mpath, e))?;
    let bpath = blob_path(stem);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn read_manifest(stem: &Path) -> Result<Manifest> {
    let mpath = manifest_path(stem);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            mpath.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

fn decode<S: Scalar, T: Scalar>(bytes: &[u8]) -> Vec<S> {
    bytes
        .chunks_exact(T::BYTES)
        .map(|c| S::of(T::read_le(c).as_f64()))
        .collect()
}

/// Parameter values in manifest order.
pub type NamedTensors<S> = Vec<(String, Tensor<S>)>;

/// Reads a checkpoint, converting stored values to `S` when the on-disk
/// dtype differs.
pub fn load<S: Scalar>(
    stem: &Path,
    architecture: &str,
) -> Result<(Manifest, NamedTensors<S>)> {
    let manifest = read_manifest(stem)?;
    if manifest.architecture != architecture {
        return Err(Error::Consistency(format!(
            "checkpoint {} holds a {} model, expected {architecture}",
            stem.display(),
            manifest.architecture
        )));
    }
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => {
            return Err(Error::Format(format!(
                "unsupported checkpoint dtype {other}"
            )))
        }
    };
    let bpath = blob_path(stem);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum::<usize>()
        * width;
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, manifest describes {expected}",
            bpath.display(),
            blob.len()
        )));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let bytes = &blob[offset..offset + n * width];
        offset += n * width;
        let data = if width == 4 {
            decode::<S, f32>(bytes)
        } else {
            decode::<S, f64>(bytes)
        };
        tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
    }
    Ok((manifest, tensors))
}
