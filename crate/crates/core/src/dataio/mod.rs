//! Image and mask files, synthetic datasets and checkpoints.

mod checkpoint;
mod pnm;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::mesh::Field;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Precision, MAGIC, VERSION};
pub use pnm::{decode, encode, read_image, read_mask, write_gray, write_image, Pnm};
pub use synth::{gen_dataset, ShapeKind, MAX_FOREGROUND, MIN_CONTRAST, MIN_FOREGROUND};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}parse error at byte {offset}: {msg}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Parse { offset: usize, msg: String, path: Option<PathBuf> },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }

    fn at(self, file: &Path) -> Self {
        match self {
            DataError::Parse { offset, msg, .. } => DataError::Parse { offset, msg, path: Some(file.to_path_buf()) },
            other => other,
        }
    }
}

/// One image with its binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: [Field; 3],
    pub mask: Field,
}

/// Writes `images/<id>.ppm` and `masks/<id>_mask.pgm` under `dir`.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<(), DataError> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| DataError::io(d, e))?;
    }
    for s in samples {
        write_image(&s.image, &images.join(format!("{}.ppm", s.id)))?;
        write_gray(&s.mask, &masks.join(format!("{}_mask.pgm", s.id)))?;
    }
    Ok(())
}

/// Loads every `images/<id>.ppm` with its `masks/<id>_mask.pgm`, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, DataError> {
    let images = dir.join("images");
    let entries = fs::read_dir(&images).map_err(|e| DataError::io(&images, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let path = e.map_err(|e| DataError::io(&images, e))?.path();
        if path.extension().is_some_and(|x| x == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let image = read_image(&images.join(format!("{id}.ppm")))?;
            let mask = read_mask(&dir.join("masks").join(format!("{id}_mask.pgm")))?;
            if !mask.same_shape(&image[0]) {
                return Err(DataError::Shape(format!("{id}: mask and image sizes differ")));
            }
            Ok(Sample { id, image, mask })
        })
        .collect()
}
