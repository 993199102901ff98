//! Dataset directories: one binary image per sample plus `index.json`.
//!
//! Image files start with two little-endian `i32`s (height, width) followed
//! by row-major `f32` pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{Difficulty, SyntheticSample};
use crate::error::{Error, Result};
use crate::landmarks::{face, NormKind, Point};
use crate::metrics::landmark_set;
use crate::numerics::Tensor;

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: u64,
    pub seed: u64,
    pub label: Difficulty,
    pub file: String,
    pub landmarks: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub image_size: usize,
    pub samples: Vec<IndexEntry>,
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = Vec::with_capacity(8 + 4 * h * w);
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    for &v in image.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Contract(format!(
            "{} has no image header",
            path.display()
        )));
    }
    let h = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if h <= 0 || w <= 0 || bytes.len() != 8 + 4 * (h as usize) * (w as usize) {
        return Err(Error::Contract(format!(
            "{}: header {h}x{w} does not match file size",
            path.display()
        )));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&[1, h as usize, w as usize], data)
}

pub fn write_dataset(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image_size = samples.first().map_or(0, |s| s.image_size());
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("sample_{:05}.bin", s.id);
        write_image(&dir.join(&file), &s.image)?;
        entries.push(IndexEntry {
            id: s.id,
            seed: s.seed,
            label: s.label,
            file,
            landmarks: s.landmarks.points.clone(),
        });
    }
    let index = DatasetIndex {
        image_size,
        samples: entries,
    };
    let path = dir.join(INDEX_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n")
        .map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticSample>> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    index
        .samples
        .into_iter()
        .map(|e| {
            let image = read_image(&dir.join(&e.file))?;
            if image.shape()[1] != index.image_size || image.shape()[2] != index.image_size {
                return Err(Error::Contract(format!(
                    "{} is not {}x{}",
                    e.file, index.image_size, index.image_size
                )));
            }
            Ok(SyntheticSample {
                id: e.id,
                seed: e.seed,
                label: e.label,
                image,
                landmarks: landmark_set(e.landmarks, NormKind::InterOcular, &face::NORM_PAIRS)?,
            })
        })
        .collect()
}
