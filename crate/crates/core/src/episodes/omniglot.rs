//! Omniglot ingestion from an `alphabet/character/image` directory tree.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassRecord, Dataset, Split};
use crate::error::{Error, Result};

pub const OMNIGLOT_SAMPLES: usize = 20;
pub const OMNIGLOT_SIDE: usize = 28;

/// Base characters are taken in sorted path order. The first `train_chars`
/// form the training pool, of which `val_chars` (chosen with `seed`) become
/// validation classes; all remaining characters are test classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmniglotConfig {
    pub augment_rotations: bool,
    pub train_chars: usize,
    pub val_chars: usize,
    pub seed: u64,
}

impl Default for OmniglotConfig {
    fn default() -> Self {
        OmniglotConfig {
            augment_rotations: true,
            train_chars: 1200,
            val_chars: 100,
            seed: 0,
        }
    }
}

pub fn load_omniglot(root: &Path, cfg: &OmniglotConfig) -> Result<Dataset> {
    let characters = list_characters(root)?;
    if cfg.train_chars > characters.len() || cfg.val_chars > cfg.train_chars {
        return Err(Error::Config(format!(
            "split {}/{} (val {}) does not fit {} characters",
            cfg.train_chars,
            characters.len().saturating_sub(cfg.train_chars),
            cfg.val_chars,
            characters.len()
        )));
    }
    let mut files = Vec::with_capacity(characters.len());
    for dir in &characters {
        let f = sorted_entries(dir, false)?;
        if f.len() != OMNIGLOT_SAMPLES {
            return Err(Error::Integrity(format!(
                "{} has {} samples, expected {OMNIGLOT_SAMPLES}",
                dir.display(),
                f.len()
            )));
        }
        files.push(f);
    }

    let decoded: Vec<std::result::Result<Vec<f32>, PathBuf>> = files
        .par_iter()
        .flatten()
        .map(|p| decode(p).ok_or_else(|| p.clone()))
        .collect();
    let bad: Vec<PathBuf> = decoded.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    if !bad.is_empty() {
        return Err(Error::Ingestion {
            reason: "unreadable or corrupt images".into(),
            paths: bad,
        });
    }
    let images: Vec<Vec<f32>> = decoded.into_iter().map(|r| r.expect("checked")).collect();

    let mut splits = vec![Split::Test; characters.len()];
    splits[..cfg.train_chars].fill(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in index::sample(&mut rng, cfg.train_chars, cfg.val_chars) {
        splits[i] = Split::Val;
    }

    let rotations = if cfg.augment_rotations { 4 } else { 1 };
    let pixels = OMNIGLOT_SIDE * OMNIGLOT_SIDE;
    let mut classes = Vec::with_capacity(characters.len() * rotations);
    for (c, samples) in images.chunks(OMNIGLOT_SAMPLES).enumerate() {
        let mut current: Vec<Vec<f32>> = samples.to_vec();
        for r in 0..rotations {
            if r > 0 {
                current = current.iter().map(|img| rotate90(img, OMNIGLOT_SIDE, OMNIGLOT_SIDE)).collect();
            }
            classes.push(ClassRecord::new(c * rotations + r, splits[c], pixels, current.concat())?);
        }
    }
    Dataset::new(vec![1, OMNIGLOT_SIDE, OMNIGLOT_SIDE], classes)
}

/// Rotates an `h×w` row-major image a quarter turn clockwise, giving `w×h`.
pub fn rotate90(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for i in 0..h {
        for j in 0..w {
            out[j * h + (h - 1 - i)] = img[i * w + j];
        }
    }
    out
}

fn decode(path: &Path) -> Option<Vec<f32>> {
    let img = image::open(path).ok()?.into_luma8();
    let side = OMNIGLOT_SIDE as u32;
    let img = if img.dimensions() == (side, side) {
        img
    } else {
        image::imageops::resize(&img, side, side, FilterType::Triangle)
    };
    Some(img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
}

fn list_characters(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for alphabet in sorted_entries(root, true)? {
        out.extend(sorted_entries(&alphabet, true)?);
    }
    if out.is_empty() {
        return Err(Error::Ingestion {
            reason: "no character directories found".into(),
            paths: vec![root.to_path_buf()],
        });
    }
    Ok(out)
}

fn sorted_entries(dir: &Path, dirs: bool) -> Result<Vec<PathBuf>> {
    let unreadable = |_| Error::Ingestion {
        reason: "cannot read directory".into(),
        paths: vec![dir.to_path_buf()],
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(unreadable)? {
        let entry = entry.map_err(unreadable)?;
        let ty = entry.file_type().map_err(unreadable)?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && ty.is_dir() == dirs && (dirs || ty.is_file()) {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotate_four_times_is_identity() {
        let img: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let r1 = rotate90(&img, 3, 4);
        // first row of the rotation is the first column read bottom-up
        assert_eq!(&r1[..3], &[8.0, 4.0, 0.0]);
        let r2 = rotate90(&r1, 4, 3);
        let r3 = rotate90(&r2, 3, 4);
        assert_eq!(rotate90(&r3, 4, 3), img);
    }

    #[test]
    fn missing_root_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_omniglot(&dir.path().join("absent"), &OmniglotConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref paths, .. } if paths.len() == 1));
    }
}
