//! Synthetic forgery samples with exact masks, and their on-disk layout
//! (`manifest.json`, `images/<id>.png`, `masks/<id>.png`).

mod generate;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use generate::{
    apply_forgery, generate_base_image, EditPlan, Region, EASY_OFFSET, FEATHER, MAX_AREA, MIN_AREA,
};

use crate::diffusion::{MaskState, TAMPERED, UNTAMPERED};
use crate::error::{invalid, io_err, Error, Result};
use crate::image::{read_gray_png, read_rgb_png, write_file, write_gray_png, write_rgb_png, Image};
use crate::rng::key_of;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgeryKind {
    Splice,
    #[serde(rename = "copymove")]
    CopyMove,
    Removal,
}

impl ForgeryKind {
    pub const ALL: [ForgeryKind; 3] = [
        ForgeryKind::Splice,
        ForgeryKind::CopyMove,
        ForgeryKind::Removal,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: MaskState,
    pub kind: ForgeryKind,
    pub difficulty: Difficulty,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub ambiguous_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 2000,
            size: 64,
            seed: 0,
            ambiguous_frac: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub kind: ForgeryKind,
    pub difficulty: Difficulty,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
    /// Run configuration and build identifier of the command that wrote the dataset.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub provenance: serde_json::Value,
}

/// Whether sample `i` is ambiguous: exactly `round`-down `frac * count` of them, spread evenly.
fn is_ambiguous(i: usize, frac: f64) -> bool {
    ((i + 1) as f64 * frac).floor() > (i as f64 * frac).floor()
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// One sample from the global seed and its index.
pub fn generate_sample(cfg: &DataConfig, i: usize) -> Result<Sample> {
    let seed = key_of(&[cfg.seed, i as u64]);
    let kind = ForgeryKind::ALL[(key_of(&[seed, 1]) % 3) as usize];
    let difficulty = if is_ambiguous(i, cfg.ambiguous_frac) {
        Difficulty::Ambiguous
    } else {
        Difficulty::Easy
    };
    let base = generate_base_image(seed, cfg.size, cfg.size)?;
    let (image, mask, _) = apply_forgery(&base, kind, difficulty, seed)?;
    Ok(Sample {
        id: sample_id(i),
        image,
        mask,
        kind,
        difficulty,
        seed,
    })
}

pub fn generate_dataset(cfg: &DataConfig) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&cfg.ambiguous_frac) {
        return Err(invalid(format!(
            "ambiguous fraction {} outside [0, 1]",
            cfg.ambiguous_frac
        )));
    }
    (0..cfg.count).map(|i| generate_sample(cfg, i)).collect()
}

/// Mask as 8-bit levels: 255 for tampered, 0 otherwise.
pub fn mask_levels(mask: &MaskState) -> Vec<f64> {
    mask.labels()
        .iter()
        .map(|&l| if l == TAMPERED { 1.0 } else { 0.0 })
        .collect()
}

pub fn write_mask_png(path: &Path, mask: &MaskState) -> Result<()> {
    write_gray_png(path, mask.height(), mask.width(), &mask_levels(mask))
}

pub fn read_mask_png(path: &Path) -> Result<MaskState> {
    let (h, w, px) = read_gray_png(path)?;
    let labels = px
        .iter()
        .map(|&v| match v {
            0 => Ok(UNTAMPERED),
            255 => Ok(TAMPERED),
            other => Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("mask value {other} is neither 0 nor 255"),
            }),
        })
        .collect::<Result<Vec<u8>>>()?;
    MaskState::new(h, w, labels, 0)
}

pub fn write_dataset(
    samples: &[Sample],
    dir: &Path,
    seed: u64,
    provenance: serde_json::Value,
) -> Result<DatasetManifest> {
    let first = samples
        .first()
        .ok_or_else(|| invalid("no samples to write"))?;
    let (height, width) = (first.image.height(), first.image.width());
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image.height() != height || s.image.width() != width {
            return Err(invalid(format!(
                "sample {} differs in size from the first sample",
                s.id
            )));
        }
        let entry = ManifestEntry {
            id: s.id.clone(),
            image: format!("images/{}.png", s.id),
            mask: format!("masks/{}.png", s.id),
            kind: s.kind,
            difficulty: s.difficulty,
            seed: s.seed,
        };
        write_rgb_png(&dir.join(&entry.image), &s.image)?;
        write_mask_png(&dir.join(&entry.mask), &s.mask)?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        height,
        width,
        seed,
        samples: entries,
        provenance,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path,
            msg: format!("manifest version {} is not {MANIFEST_VERSION}", m.version),
        });
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let m = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in &m.samples {
        let image = read_rgb_png(&dir.join(&e.image))?;
        let mask = read_mask_png(&dir.join(&e.mask))?;
        let img_path: PathBuf = dir.join(&e.image);
        if image.height() != m.height
            || image.width() != m.width
            || mask.height() != m.height
            || mask.width() != m.width
        {
            return Err(Error::Format {
                path: img_path,
                msg: format!(
                    "sample {} does not match the manifest size {}x{}",
                    e.id, m.height, m.width
                ),
            });
        }
        samples.push(Sample {
            id: e.id.clone(),
            image,
            mask,
            kind: e.kind,
            difficulty: e.difficulty,
            seed: e.seed,
        });
    }
    Ok((m, samples))
}

/// First `train_frac` of the samples for training, the rest held out.
pub fn split(samples: &[Sample], train_frac: f64) -> (&[Sample], &[Sample]) {
    let n = ((samples.len() as f64) * train_frac).round() as usize;
    samples.split_at(n.min(samples.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub samples: usize,
    pub mean_tampered_fraction: f64,
    pub min_tampered_fraction: f64,
    pub max_tampered_fraction: f64,
    pub splice: usize,
    pub copymove: usize,
    pub removal: usize,
    pub easy: usize,
    pub ambiguous: usize,
}

pub fn class_balance(samples: &[Sample]) -> ClassBalance {
    let fr: Vec<f64> = samples.iter().map(|s| s.mask.tampered_fraction()).collect();
    let count = |k: ForgeryKind| samples.iter().filter(|s| s.kind == k).count();
    ClassBalance {
        samples: samples.len(),
        mean_tampered_fraction: fr.iter().sum::<f64>() / fr.len().max(1) as f64,
        min_tampered_fraction: fr.iter().copied().fold(f64::INFINITY, f64::min),
        max_tampered_fraction: fr.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        splice: count(ForgeryKind::Splice),
        copymove: count(ForgeryKind::CopyMove),
        removal: count(ForgeryKind::Removal),
        easy: samples
            .iter()
            .filter(|s| s.difficulty == Difficulty::Easy)
            .count(),
        ambiguous: samples
            .iter()
            .filter(|s| s.difficulty == Difficulty::Ambiguous)
            .count(),
    }
}

impl std::fmt::Display for ClassBalance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples            {}", self.samples)?;
        writeln!(
            f,
            "tampered fraction  mean {:.4}  min {:.4}  max {:.4}",
            self.mean_tampered_fraction, self.min_tampered_fraction, self.max_tampered_fraction
        )?;
        writeln!(
            f,
            "kinds              splice {}  copymove {}  removal {}",
            self.splice, self.copymove, self.removal
        )?;
        write!(
            f,
            "difficulty         easy {}  ambiguous {}",
            self.easy, self.ambiguous
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(count: usize, frac: f64) -> DataConfig {
        DataConfig {
            count,
            size: 32,
            seed: 3,
            ambiguous_frac: frac,
        }
    }

    #[test]
    fn ambiguous_share_is_exact() {
        let n = (0..100).filter(|&i| is_ambiguous(i, 0.25)).count();
        assert_eq!(n, 25);
        assert_eq!((0..100).filter(|&i| is_ambiguous(i, 0.0)).count(), 0);
        assert_eq!((0..100).filter(|&i| is_ambiguous(i, 1.0)).count(), 100);
    }

    #[test]
    fn dataset_round_trip() {
        let samples = generate_dataset(&cfg(6, 0.5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&samples, dir.path(), 3, serde_json::Value::Null).unwrap();
        assert_eq!(m.samples.len(), 6);
        let (m2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.mask, b.mask);
            // Generated images are already 8-bit, so the round trip is exact.
            assert_eq!(a.image, b.image);
            assert_eq!((a.kind, a.difficulty, &a.id), (b.kind, b.difficulty, &b.id));
        }
    }

    #[test]
    fn missing_mask_is_reported_with_path() {
        let samples = generate_dataset(&cfg(2, 0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, dir.path(), 3, serde_json::Value::Null).unwrap();
        std::fs::remove_file(dir.path().join("masks/s00001.png")).unwrap();
        let e = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(e.contains("masks/s00001.png"), "{e}");
    }

    #[test]
    fn corrupt_mask_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_gray_png(&p, 2, 2, &[0.0, 0.5, 1.0, 0.0]).unwrap();
        assert!(read_mask_png(&p).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_dataset(&cfg(4, 0.25)).unwrap();
        let b = generate_dataset(&cfg(4, 0.25)).unwrap();
        assert_eq!(a, b);
    }
}
