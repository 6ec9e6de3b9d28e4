//! On-disk datasets: a directory of PGM prints, minutia text files and a
//! JSON manifest `[{id, imagePath, minutiaPath, quality}]` with paths
//! relative to the directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::TruthEntry;
use crate::image::{read_pgm, GrayImage};
use crate::minutia::{read_minutiae, Minutia};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub minutia_path: String,
    pub quality: String,
}

/// One training or evaluation print held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, H, W]` intensities in `[0, 1]`.
    pub image: Tensor,
    pub truth: Vec<Minutia>,
    pub quality: Option<String>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn truth_entry(&self) -> TruthEntry {
        TruthEntry {
            id: self.id.clone(),
            minutiae: self.truth.clone(),
            quality: self.quality.clone(),
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(entries).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn resolve(dir: &Path, relative: &str) -> PathBuf {
    dir.join(relative)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let image = read_pgm(&resolve(dir, &e.image_path))?;
            Ok(Sample {
                image: image.to_tensor(),
                truth: read_minutiae(&resolve(dir, &e.minutia_path))?,
                id: e.id,
                quality: Some(e.quality),
            })
        })
        .collect()
}

/// Rounds intensities to the 8-bit grid so in-memory and on-disk prints agree.
pub fn quantize(image: &Tensor) -> Tensor {
    GrayImage::from_tensor(image).to_tensor()
}
