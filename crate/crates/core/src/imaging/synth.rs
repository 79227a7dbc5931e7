//! Synthetic paired datasets with known ground truth.
//!
//! Each pair is a procedural base frame and its regrading by an exact
//! polynomial color mapping. The mapping's style matrix is a smooth,
//! nonlinear function of a small latent draw: a global gamma, a warm/cool
//! temperature shift, a saturation change and a contrast change, one per
//! factor, fitted once to a polynomial on a color lattice.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{split_ids, Direction, ImagePair, PairEntry, PairedDataset, Split, MANIFEST_FILE};
use super::{load_image, save_image, BitDepth, ImageBuffer, ImagingError, Pixel};
use crate::pcc::{apply_style_matrix, fit_style_matrix, StyleMatrix};

pub const MAX_FACTORS: usize = 4;
/// Latent draws are clipped to `±LATENT_CLIP`.
pub const LATENT_CLIP: f64 = 2.0;
const LATTICE: usize = 8;
const TILES: usize = 16;

pub const LATENTS_FILE: &str = "latents.csv";
pub const MATRICES_FILE: &str = "matrices.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Number of latent grading factors, 0..=4. Zero gives one fixed look.
    pub factors: usize,
    pub pairs: usize,
    pub width: usize,
    pub height: usize,
    /// Polynomial degree of the generated mappings.
    pub degree: u8,
    /// When set, latents are drawn around this many fixed cluster centres.
    pub clusters: Option<usize>,
    pub cluster_jitter: f64,
    /// Optional directory of base frames used instead of procedural ones.
    pub base_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            factors: 3,
            pairs: 200,
            width: 256,
            height: 256,
            degree: 4,
            clusters: None,
            cluster_jitter: 0.15,
            base_dir: None,
            seed: 0,
        }
    }
}

/// An in-memory synthetic dataset with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub pairs: Vec<ImagePair>,
    pub splits: Vec<Split>,
    /// One row of `spec.factors` values per pair.
    pub latents: Vec<Vec<f64>>,
    pub matrices: Vec<StyleMatrix>,
    /// Cluster index per pair in cluster mode.
    pub cluster_labels: Option<Vec<usize>>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// The reference grading, applied to one pixel.
///
/// Factor 0 sets a global gamma, factor 1 a warm/cool channel gamma split,
/// factor 2 the saturation and factor 3 the contrast. Saturation and contrast
/// only pull colors toward the pixel mean and mid-grey, so every look stays
/// inside the unit cube and the generated targets are never clipped.
pub fn grade_pixel(p: [f64; 3], latent: &[f64]) -> [f64; 3] {
    let l = |i: usize| latent.get(i).copied().unwrap_or(0.0);
    if latent.is_empty() {
        // fixed look: slightly lifted and warmer
        return grade_pixel(p, &[-0.4, 0.5, 0.0]);
    }
    let gamma = (0.5 * l(0)).exp();
    let warm = 0.25 * l(1);
    let exps = [gamma * (-warm).exp(), gamma, gamma * warm.exp()];
    let mut q = [0.0; 3];
    for c in 0..3 {
        q[c] = p[c].clamp(0.0, 1.0).powf(exps[c]);
    }
    let sat = 0.3 + 0.7 * sigmoid(1.5 * l(2));
    let mean = (q[0] + q[1] + q[2]) / 3.0;
    let contrast = 0.6 + 0.4 * sigmoid(1.5 * l(3));
    q.map(|v| 0.5 + contrast * (mean + sat * (v - mean) - 0.5))
}

/// The polynomial style matrix closest to [`grade_pixel`] on a color lattice.
pub fn style_matrix_for(latent: &[f64], degree: u8) -> Result<StyleMatrix, ImagingError> {
    let step = 1.0 / (LATTICE - 1) as f64;
    let mut sources = Vec::with_capacity(LATTICE.pow(3));
    for r in 0..LATTICE {
        for g in 0..LATTICE {
            for b in 0..LATTICE {
                sources.push([r as f64 * step, g as f64 * step, b as f64 * step]);
            }
        }
    }
    let targets: Vec<[f64; 3]> = sources.iter().map(|&p| grade_pixel(p, latent)).collect();
    fit_style_matrix(&sources, &targets, degree).map_err(|e| ImagingError::Spec(e.to_string()))
}

fn procedural_base(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Result<ImageBuffer, ImagingError> {
    fn color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Pixel {
        [0; 3].map(|_| rng.random_range(lo..hi))
    }
    let corners = [0; 4].map(|_| color(rng, 0.1, 0.9));
    // a mosaic of flat random tiles spreads the frame over the color cube
    let tiles: Vec<Pixel> = (0..TILES * TILES).map(|_| color(rng, 0.05, 0.95)).collect();
    let blobs: Vec<(f32, f32, f32, Pixel)> = (0..3)
        .map(|_| {
            let c = color(rng, 0.05, 0.95);
            (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.08..0.3), c)
        })
        .collect();
    let noise: Vec<f32> = (0..width * height * 3)
        .map(|_| 0.02 * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng))
        .collect();
    ImageBuffer::from_fn(width, height, |x, y| {
        let u = (x as f32 + 0.5) / width as f32;
        let v = (y as f32 + 0.5) / height as f32;
        let mut p = [0.0f32; 3];
        for c in 0..3 {
            let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
            let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
            p[c] = top * (1.0 - v) + bottom * v;
        }
        let tx = (x * TILES / width).min(TILES - 1);
        let ty = (y * TILES / height).min(TILES - 1);
        let tile = tiles[ty * TILES + tx];
        for c in 0..3 {
            p[c] = 0.3 * p[c] + 0.7 * tile[c];
        }
        for &(bx, by, radius, bc) in &blobs {
            let d2 = (u - bx).powi(2) + (v - by).powi(2);
            let w = (-d2 / (2.0 * radius * radius)).exp();
            for c in 0..3 {
                p[c] = p[c] * (1.0 - w) + bc[c] * w;
            }
        }
        let i = (y * width + x) * 3;
        [0, 1, 2].map(|c| (p[c] + noise[i + c]).clamp(0.02, 0.98))
    })
}

fn draw_latents(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Option<Vec<usize>>) {
    let clip = |v: f64| v.clamp(-LATENT_CLIP, LATENT_CLIP);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    match spec.clusters {
        None => {
            let latents = (0..spec.pairs)
                .map(|_| (0..spec.factors).map(|_| clip(normal(rng))).collect())
                .collect();
            (latents, None)
        }
        Some(k) => {
            // well-separated centres: rejection sampling on pairwise distance
            let mut centres: Vec<Vec<f64>> = Vec::with_capacity(k);
            let mut attempts = 0;
            while centres.len() < k {
                let c: Vec<f64> = (0..spec.factors).map(|_| rng.random_range(-1.6..1.6)).collect();
                attempts += 1;
                let far = centres
                    .iter()
                    .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() > 1.2);
                if far || attempts > 10_000 {
                    centres.push(c);
                }
            }
            let jitter = Normal::new(0.0, spec.cluster_jitter).expect("validated jitter");
            let mut labels = Vec::with_capacity(spec.pairs);
            let latents = (0..spec.pairs)
                .map(|i| {
                    let label = i % k;
                    labels.push(label);
                    centres[label].iter().map(|&m| clip(m + jitter.sample(rng))).collect()
                })
                .collect();
            (latents, Some(labels))
        }
    }
}

fn validate(spec: &SynthSpec) -> Result<(), ImagingError> {
    let bad = |m: &str| Err(ImagingError::Spec(m.to_owned()));
    if spec.factors > MAX_FACTORS {
        return bad("at most 4 factors");
    }
    if spec.pairs == 0 || spec.width == 0 || spec.height == 0 {
        return bad("pairs, width and height must be positive");
    }
    if let Some(k) = spec.clusters {
        if k == 0 || spec.factors == 0 {
            return bad("clusters need at least one cluster and one factor");
        }
    }
    if !(spec.cluster_jitter >= 0.0 && spec.cluster_jitter.is_finite()) {
        return bad("cluster jitter must be a non-negative number");
    }
    Ok(())
}

pub fn pair_id(index: usize) -> String {
    format!("pair{index:04}")
}

/// Builds the dataset in memory. Deterministic under `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset, ImagingError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (latents, cluster_labels) = draw_latents(spec, &mut rng);
    let user_bases: Option<Vec<ImageBuffer>> = match &spec.base_dir {
        None => None,
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| ImagingError::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            paths.sort();
            let bases: Vec<ImageBuffer> = paths
                .iter()
                .filter_map(|p| load_image(p).ok())
                .map(|img| img.resize_nearest(spec.width, spec.height))
                .collect::<Result<_, _>>()?;
            if bases.is_empty() {
                return Err(ImagingError::Spec(format!("no readable images in {}", dir.display())));
            }
            Some(bases)
        }
    };

    let generated: Vec<Result<(ImagePair, StyleMatrix), ImagingError>> = (0..spec.pairs)
        .into_par_iter()
        .map(|i| {
            let source = match &user_bases {
                Some(b) => b[i % b.len()].clone(),
                None => {
                    let mut prng = ChaCha8Rng::seed_from_u64(spec.seed);
                    prng.set_stream(i as u64 + 1);
                    procedural_base(spec.width, spec.height, &mut prng)?
                }
            };
            let m = style_matrix_for(&latents[i], spec.degree)?;
            let target = apply_style_matrix(&source, &m);
            Ok((ImagePair::new(pair_id(i), source, target)?, m))
        })
        .collect();
    let mut pairs = Vec::with_capacity(spec.pairs);
    let mut matrices = Vec::with_capacity(spec.pairs);
    for g in generated {
        let (p, m) = g?;
        pairs.push(p);
        matrices.push(m);
    }
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    Ok(SynthDataset {
        spec: spec.clone(),
        splits: split_ids(&ids, spec.seed),
        pairs,
        latents,
        matrices,
        cluster_labels,
    })
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> Vec<&ImagePair> {
        self.pairs
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p)
            .collect()
    }

    /// Indices of the pairs in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn latents_csv(&self) -> String {
        let mut s = String::from("id");
        for k in 0..self.spec.factors {
            let _ = write!(s, ",z{k}");
        }
        if self.cluster_labels.is_some() {
            s.push_str(",cluster");
        }
        s.push('\n');
        for (i, (p, l)) in self.pairs.iter().zip(&self.latents).enumerate() {
            s.push_str(&p.id);
            for v in l {
                let _ = write!(s, ",{v:?}");
            }
            if let Some(labels) = &self.cluster_labels {
                let _ = write!(s, ",{}", labels[i]);
            }
            s.push('\n');
        }
        s
    }

    /// Writes 16-bit PNG frames under `source/` and `target/`, a manifest,
    /// and the ground-truth latents and matrices.
    pub fn write_to(&self, dir: &Path) -> Result<PairedDataset, ImagingError> {
        for sub in ["source", "target"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| ImagingError::io(&d, e))?;
        }
        self.pairs.par_iter().try_for_each(|p| {
            save_image(&p.source, &dir.join("source").join(format!("{}.png", p.id)), BitDepth::Sixteen)?;
            save_image(&p.target, &dir.join("target").join(format!("{}.png", p.id)), BitDepth::Sixteen)
        })?;
        let write = |name: &str, text: &str| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| ImagingError::io(&path, e))
        };
        write(LATENTS_FILE, &self.latents_csv())?;
        let mut mats = String::new();
        for (p, m) in self.pairs.iter().zip(&self.matrices) {
            let _ = writeln!(mats, "# {}", p.id);
            mats.push_str(&m.to_text());
            mats.push('\n');
        }
        write(MATRICES_FILE, &mats)?;

        let dataset = PairedDataset {
            direction: Direction::ForwardTm,
            split_seed: self.spec.seed,
            pairs: self
                .pairs
                .iter()
                .zip(&self.splits)
                .map(|(p, &split)| PairEntry {
                    id: p.id.clone(),
                    source: PathBuf::from("source").join(format!("{}.png", p.id)),
                    target: PathBuf::from("target").join(format!("{}.png", p.id)),
                    split,
                })
                .collect(),
            unmatched: Vec::new(),
        };
        let manifest = dir.join(MANIFEST_FILE);
        dataset.save_manifest(&manifest)?;
        PairedDataset::load_manifest(&manifest)
    }
}
