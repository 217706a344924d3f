use std::path::Path;

use anyhow::{bail, Context, Result};
use frace_core::datasets::{
    load_emnist_letters, load_idx_dataset, Dataset, DatasetDescriptor, IdxSplit,
};

/// Dataset identifiers accepted by `--dataset`.
pub const DATASETS: &[&str] = &["mnist", "emnist-letters"];

pub fn descriptor(id: &str) -> Result<DatasetDescriptor> {
    match id {
        "mnist" => Ok(DatasetDescriptor::mnist()),
        "emnist-letters" | "letters" | "letter" => Ok(DatasetDescriptor::letters()),
        other => bail!("unknown dataset '{other}' (known: {})", DATASETS.join(", ")),
    }
}

pub fn load_split(id: &str, dir: &Path, split: IdxSplit) -> Result<Dataset<f32>> {
    let data = match id {
        "mnist" => load_idx_dataset(dir, split, &DatasetDescriptor::mnist()),
        "emnist-letters" | "letters" | "letter" => load_emnist_letters(dir, split),
        other => bail!("unknown dataset '{other}' (known: {})", DATASETS.join(", ")),
    };
    data.with_context(|| format!("loading {id} {split:?} split from {}", dir.display()))
}
