use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_image, ImageBuffer, ImagingError};

/// Fraction of pairs assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

pub const MANIFEST_FILE: &str = "manifest.json";

const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "jpg", "jpeg"];

/// Which side of a pair the model predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Source frames are the HDR (or ungraded) originals, targets the graded SDR.
    ForwardTm,
    /// Roles swapped: SDR frames in, HDR frames out.
    InverseTm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub split: Split,
}

/// Aligned (source, target) frames matched by file stem, with a seeded
/// train/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub direction: Direction,
    pub split_seed: u64,
    pub pairs: Vec<PairEntry>,
    /// Stems present on only one side.
    #[serde(default)]
    pub unmatched: Vec<String>,
}

/// A loaded pair of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub source: ImageBuffer,
    pub target: ImageBuffer,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, source: ImageBuffer, target: ImageBuffer) -> Result<Self, ImagingError> {
        let id = id.into();
        if source.dims() != target.dims() {
            return Err(ImagingError::PairDimensions(vec![id]));
        }
        Ok(Self { id, source, target })
    }

    /// The same pair with source and target exchanged.
    pub fn swapped(self) -> Self {
        Self {
            id: self.id,
            source: self.target,
            target: self.source,
        }
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>, ImagingError> {
    let entries = fs::read_dir(dir).map_err(|e| ImagingError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| ImagingError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some(e) if IMAGE_EXTENSIONS.contains(&e)) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

/// Assigns `round(0.8 · n)` of the ids to training after a seeded shuffle.
pub fn split_ids(ids: &[String], seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ids.len() as f64 * TRAIN_FRACTION).round() as usize;
    let mut splits = vec![Split::Test; ids.len()];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    splits
}

/// Matches files in `source_dir` and `target_dir` by stem.
///
/// Every matched pair must have equal dimensions; mismatches are reported
/// together. Stems found on only one side are kept in `unmatched`.
pub fn build_dataset(
    source_dir: &Path,
    target_dir: &Path,
    split_seed: u64,
    direction: Direction,
) -> Result<PairedDataset, ImagingError> {
    for dir in [source_dir, target_dir] {
        if !dir.is_dir() {
            return Err(ImagingError::MissingDirectory(dir.to_path_buf()));
        }
    }
    let sources = list_images(source_dir)?;
    let targets = list_images(target_dir)?;
    let mut unmatched: Vec<String> = sources
        .keys()
        .filter(|k| !targets.contains_key(*k))
        .map(|k| format!("source only: {k}"))
        .collect();
    unmatched.extend(
        targets
            .keys()
            .filter(|k| !sources.contains_key(*k))
            .map(|k| format!("target only: {k}")),
    );
    let matched: Vec<(String, PathBuf, PathBuf)> = sources
        .iter()
        .filter_map(|(k, s)| targets.get(k).map(|t| (k.clone(), s.clone(), t.clone())))
        .collect();
    if matched.is_empty() {
        return Err(ImagingError::NoPairs {
            source_dir: source_dir.to_path_buf(),
            target_dir: target_dir.to_path_buf(),
        });
    }

    let mut mismatched = Vec::new();
    for (id, s, t) in &matched {
        let ds = image::image_dimensions(s).map_err(|e| ImagingError::Decode {
            what: s.display().to_string(),
            message: e.to_string(),
        })?;
        let dt = image::image_dimensions(t).map_err(|e| ImagingError::Decode {
            what: t.display().to_string(),
            message: e.to_string(),
        })?;
        if ds != dt {
            mismatched.push(id.clone());
        }
    }
    if !mismatched.is_empty() {
        return Err(ImagingError::PairDimensions(mismatched));
    }

    let ids: Vec<String> = matched.iter().map(|m| m.0.clone()).collect();
    let splits = split_ids(&ids, split_seed);
    let pairs = matched
        .into_iter()
        .zip(splits)
        .map(|((id, s, t), split)| {
            let (source, target) = match direction {
                Direction::ForwardTm => (s, t),
                Direction::InverseTm => (t, s),
            };
            PairEntry {
                id,
                source,
                target,
                split,
            }
        })
        .collect();
    Ok(PairedDataset {
        direction,
        split_seed,
        pairs,
        unmatched,
    })
}

impl PairedDataset {
    /// Opens `dir/manifest.json` if present, otherwise pairs `dir/source`
    /// with `dir/target`.
    pub fn open(dir: &Path, split_seed: u64, direction: Direction) -> Result<Self, ImagingError> {
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.is_file() {
            let ds = Self::load_manifest(&manifest)?;
            return Ok(if ds.direction == direction { ds } else { ds.with_direction(direction) });
        }
        if !dir.is_dir() {
            return Err(ImagingError::MissingDirectory(dir.to_path_buf()));
        }
        build_dataset(&dir.join("source"), &dir.join("target"), split_seed, direction)
    }

    /// Swaps every pair's roles if `direction` differs from the current one.
    pub fn with_direction(mut self, direction: Direction) -> Self {
        if direction != self.direction {
            for p in &mut self.pairs {
                std::mem::swap(&mut p.source, &mut p.target);
            }
            self.direction = direction;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn entries(&self, split: Option<Split>) -> impl Iterator<Item = &PairEntry> {
        self.pairs
            .iter()
            .filter(move |p| split.is_none_or(|s| p.split == s))
    }

    /// Loads the frames of one split (or all pairs).
    pub fn load(&self, split: Option<Split>) -> Result<Vec<ImagePair>, ImagingError> {
        let entries: Vec<&PairEntry> = self.entries(split).collect();
        let loaded: Vec<Result<ImagePair, ImagingError>> = entries
            .par_iter()
            .map(|e| ImagePair::new(e.id.clone(), load_image(&e.source)?, load_image(&e.target)?))
            .collect();
        loaded.into_iter().collect()
    }

    pub fn save_manifest(&self, path: &Path) -> Result<(), ImagingError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| ImagingError::Manifest(e.to_string()))?;
        fs::write(path, json).map_err(|e| ImagingError::io(path, e))
    }

    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn load_manifest(path: &Path) -> Result<Self, ImagingError> {
        let text = fs::read_to_string(path).map_err(|e| ImagingError::io(path, e))?;
        let mut ds: PairedDataset = serde_json::from_str(&text).map_err(|e| ImagingError::Manifest(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut ds.pairs {
            if p.source.is_relative() {
                p.source = base.join(&p.source);
            }
            if p.target.is_relative() {
                p.target = base.join(&p.target);
            }
        }
        Ok(ds)
    }
}
