//! Style vectors: extraction from a pair, application to new frames, grids
//! for exploration and dataset-wide style maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{Conditioning, FlowError, FlowModel};
use crate::imaging::{ImageBuffer, ImagePair, ImagingError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StyleError {
    #[error("style has {got} dimensions but the model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("style vectors have 2 to 4 dimensions, got {0}")]
    Unsupported(usize),
    #[error("style value {index} is not finite")]
    NonFinite { index: usize },
    #[error("source is {source_dims:?} but target is {target_dims:?}")]
    ImageDimensions {
        source_dims: (usize, usize),
        target_dims: (usize, usize),
    },
    #[error("conditioning covers {cond} pixels but the image has {image}")]
    ConditioningSize { cond: usize, image: usize },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid style record: {0}")]
    Record(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Where a style vector came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Extracted { frame: String },
    Manual,
    Zero,
    Interpolated,
}

/// A point in the latent style space of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    values: Vec<f64>,
    provenance: Provenance,
}

fn check_values(values: &[f64]) -> Result<(), StyleError> {
    if !(2..=4).contains(&values.len()) {
        return Err(StyleError::Unsupported(values.len()));
    }
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(StyleError::NonFinite { index }),
        None => Ok(()),
    }
}

impl StyleVector {
    pub fn new(values: Vec<f64>, provenance: Provenance) -> Result<Self, StyleError> {
        check_values(&values)?;
        Ok(Self { values, provenance })
    }

    /// A hand-set style; all zeros is marked [`Provenance::Zero`].
    pub fn manual(values: Vec<f64>) -> Result<Self, StyleError> {
        let provenance = if values.iter().all(|&v| v == 0.0) {
            Provenance::Zero
        } else {
            Provenance::Manual
        };
        Self::new(values, provenance)
    }

    /// The average style.
    pub fn zero(dims: usize) -> Result<Self, StyleError> {
        Self::new(vec![0.0; dims], Provenance::Zero)
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// `(1 − t)·a + t·b`.
    pub fn lerp(a: &Self, b: &Self, t: f64) -> Result<Self, StyleError> {
        if a.dims() != b.dims() {
            return Err(StyleError::Dimension {
                expected: a.dims(),
                got: b.dims(),
            });
        }
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x + t * (y - x)).collect();
        Self::new(values, Provenance::Interpolated)
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_record(&self, model_id: &str) -> StyleRecord {
        StyleRecord {
            model_id: model_id.to_owned(),
            dims: self.dims(),
            values: self.values.clone(),
            provenance: self.provenance.clone(),
        }
    }

    fn check_model(&self, model: &FlowModel<f32>) -> Result<(), StyleError> {
        if self.dims() != model.latent_dim() {
            return Err(StyleError::Dimension {
                expected: model.latent_dim(),
                got: self.dims(),
            });
        }
        Ok(())
    }
}

/// Serialized form of a style vector, shared by the CLI, the service and the
/// grading UI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRecord {
    pub model_id: String,
    pub dims: usize,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl StyleRecord {
    pub fn to_style(&self) -> Result<StyleVector, StyleError> {
        if self.dims != self.values.len() {
            return Err(StyleError::Record(format!(
                "dims is {} but {} values are given",
                self.dims,
                self.values.len()
            )));
        }
        StyleVector::new(self.values.clone(), self.provenance.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("style records serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, StyleError> {
        serde_json::from_str(text).map_err(|e| StyleError::Record(e.to_string()))
    }
}

/// Style as the centroid of the per-pixel latents of `target`, conditioned on
/// `source`, over every pixel.
pub fn extract_style(model: &FlowModel<f32>, source: &ImageBuffer, target: &ImageBuffer, frame: &str) -> Result<StyleVector, StyleError> {
    if source.dims() != target.dims() {
        return Err(StyleError::ImageDimensions {
            source_dims: source.dims(),
            target_dims: target.dims(),
        });
    }
    let cond = Conditioning::from_image(source, model.degree())?;
    extract_with_conditioning(model, &cond, target, frame)
}

/// [`extract_style`] with a precomputed source conditioning.
pub fn extract_with_conditioning(model: &FlowModel<f32>, cond: &Conditioning<f32>, target: &ImageBuffer, frame: &str) -> Result<StyleVector, StyleError> {
    if cond.len() != target.len() {
        return Err(StyleError::ConditioningSize {
            cond: cond.len(),
            image: target.len(),
        });
    }
    let mean = model.mean_latent(target.pixels(), cond)?;
    StyleVector::new(
        mean,
        Provenance::Extracted {
            frame: frame.to_owned(),
        },
    )
}

/// Renders `source` in `style`, clamped to `[0, 1]`.
pub fn apply_style(model: &FlowModel<f32>, source: &ImageBuffer, style: &StyleVector) -> Result<ImageBuffer, StyleError> {
    style.check_model(model)?;
    let cond = Conditioning::from_image(source, model.degree())?;
    apply_with_conditioning(model, &cond, source.width(), source.height(), style)
}

/// [`apply_style`] with a precomputed source conditioning; this is the
/// interactive path.
pub fn apply_with_conditioning(model: &FlowModel<f32>, cond: &Conditioning<f32>, width: usize, height: usize, style: &StyleVector) -> Result<ImageBuffer, StyleError> {
    style.check_model(model)?;
    if cond.len() != width * height {
        return Err(StyleError::ConditioningSize {
            cond: cond.len(),
            image: width * height,
        });
    }
    let z: Vec<f32> = style.values().iter().map(|&v| v as f32).collect();
    let pixels = model.forward_batch(&z, None, cond)?;
    // from_pixels clamps into [0, 1]
    Ok(ImageBuffer::from_pixels(width, height, pixels)?)
}

/// A 2-D sweep through style space.
///
/// Columns vary `axes.0` from `−range` to `+range` left to right; rows vary
/// `axes.1` from `+range` at the top to `−range` at the bottom. Other
/// coordinates stay at `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: (usize, usize),
    pub center: Vec<f64>,
    pub range: f64,
    pub resolution: usize,
    /// Thumbnail width in pixels; the source is used at full size if `None`.
    pub thumb_width: Option<usize>,
}

impl GridSpec {
    /// A `resolution × resolution` grid over the first two axes around zero.
    pub fn centered(dims: usize, resolution: usize) -> Self {
        Self {
            axes: (0, 1),
            center: vec![0.0; dims],
            range: 2.0,
            resolution,
            thumb_width: None,
        }
    }

    fn validate(&self, dims: usize) -> Result<(), StyleError> {
        if self.center.len() != dims {
            return Err(StyleError::Dimension {
                expected: dims,
                got: self.center.len(),
            });
        }
        let (a, b) = self.axes;
        if a >= dims || b >= dims || a == b {
            return Err(StyleError::Grid(format!("axes ({a}, {b}) must be two distinct indices below {dims}")));
        }
        if self.resolution == 0 {
            return Err(StyleError::Grid("resolution must be at least 1".into()));
        }
        if !(self.range.is_finite() && self.range >= 0.0) {
            return Err(StyleError::Grid(format!("range must be finite and non-negative, got {}", self.range)));
        }
        if self.thumb_width == Some(0) {
            return Err(StyleError::Grid("thumbnail width must be positive".into()));
        }
        check_values(&self.center)
    }

    fn offset(&self, i: usize) -> f64 {
        if self.resolution == 1 {
            0.0
        } else {
            -self.range + 2.0 * self.range * i as f64 / (self.resolution - 1) as f64
        }
    }

    /// Style at grid cell `(row, col)`.
    pub fn point(&self, row: usize, col: usize) -> Vec<f64> {
        let mut v = self.center.clone();
        v[self.axes.0] += self.offset(col);
        v[self.axes.1] -= self.offset(row);
        v
    }
}

/// Rendered grid; `tiles` and `points` are row-major.
#[derive(Clone, Debug)]
pub struct StyleGrid {
    pub spec: GridSpec,
    pub points: Vec<StyleVector>,
    pub tiles: Vec<ImageBuffer>,
}

impl StyleGrid {
    pub fn tile(&self, row: usize, col: usize) -> &ImageBuffer {
        &self.tiles[row * self.spec.resolution + col]
    }

    /// All tiles composed into one image.
    pub fn mosaic(&self) -> Result<ImageBuffer, StyleError> {
        let n = self.spec.resolution;
        let (tw, th) = self.tiles[0].dims();
        let image = ImageBuffer::from_fn(n * tw, n * th, |x, y| self.tile(y / th, x / tw).pixel(x % tw, y % th))?;
        Ok(image)
    }
}

pub fn style_grid(model: &FlowModel<f32>, source: &ImageBuffer, spec: &GridSpec) -> Result<StyleGrid, StyleError> {
    spec.validate(model.latent_dim())?;
    let thumb = match spec.thumb_width {
        Some(w) if w < source.width() => {
            let h = ((source.height() * w) as f64 / source.width() as f64).round().max(1.0) as usize;
            source.resize_nearest(w, h)?
        }
        _ => source.clone(),
    };
    let cond = Conditioning::from_image(&thumb, model.degree())?;
    let n = spec.resolution;
    let points = (0..n * n)
        .map(|i| {
            let v = spec.point(i / n, i % n);
            let provenance = if v.iter().all(|&x| x == 0.0) {
                Provenance::Zero
            } else {
                Provenance::Interpolated
            };
            StyleVector::new(v, provenance)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let tiles = points
        .iter()
        .map(|p| apply_with_conditioning(model, &cond, thumb.width(), thumb.height(), p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StyleGrid {
        spec: spec.clone(),
        points,
        tiles,
    })
}

/// One extracted style per pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMapEntry {
    pub id: String,
    pub values: Vec<f64>,
}

/// Style map of a dataset, as served to the scatter view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMap {
    pub model_id: String,
    pub dims: usize,
    pub entries: Vec<StyleMapEntry>,
}

pub fn dataset_style_map(model: &FlowModel<f32>, model_id: &str, pairs: &[ImagePair]) -> Result<StyleMap, StyleError> {
    let entries = pairs
        .par_iter()
        .map(|p| {
            let style = extract_style(model, &p.source, &p.target, &p.id)?;
            Ok(StyleMapEntry {
                id: p.id.clone(),
                values: style.values,
            })
        })
        .collect::<Result<Vec<_>, StyleError>>()?;
    Ok(StyleMap {
        model_id: model_id.to_owned(),
        dims: model.latent_dim(),
        entries,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding, best of `restarts` by inertia.
/// Returns a cluster index per point.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    assert!(k >= 1 && k <= points.len(), "k must be in 1..=points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centres = vec![points[rng.random_range(0..points.len())].clone()];
        while centres.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| centres.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if pick < *di {
                    chosen = i;
                    break;
                }
                pick -= di;
            }
            centres.push(points[chosen].clone());
        }
        let mut assign = vec![0usize; points.len()];
        for _ in 0..100 {
            let next: Vec<usize> = points
                .iter()
                .map(|p| {
                    (0..k)
                        .min_by(|&a, &b| sq_dist(p, &centres[a]).total_cmp(&sq_dist(p, &centres[b])))
                        .unwrap_or(0)
                })
                .collect();
            let changed = next != assign;
            assign = next;
            for (c, centre) in centres.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (d, v) in centre.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centres[a])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    best.map(|(_, a)| a).unwrap_or_default()
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn cluster_purity(assignments: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(assignments.len(), labels.len());
    if labels.is_empty() {
        return 1.0;
    }
    let clusters = assignments.iter().max().map_or(0, |m| m + 1);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; classes]; clusters];
    for (&a, &l) in assignments.iter().zip(labels) {
        counts[a][l] += 1;
    }
    let majority: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    majority as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{build_model, FlowConfig, Variant};

    fn model(variant: Variant) -> FlowModel<f32> {
        let mut m = build_model(FlowConfig::new(variant, 2, 12, 5)).unwrap();
        m.jitter_params(0.2, 9);
        m.mark_actnorm_ready();
        m
    }

    fn source() -> ImageBuffer {
        ImageBuffer::from_fn(12, 9, |x, y| [x as f32 / 12.0, y as f32 / 9.0, ((x * y) % 7) as f32 / 7.0]).unwrap()
    }

    #[test]
    fn extract_recovers_constant_latent() {
        // the augmented variant drops its fourth output channel on render, so
        // it only round-trips approximately
        for variant in [Variant::Dim2Split, Variant::Dim3] {
            // a mild model keeps the rendered target inside [0, 1]
            let mut m = build_model(FlowConfig::new(variant, 2, 12, 5)).unwrap();
            m.jitter_params(0.02, 9);
            m.mark_actnorm_ready();
            let z0 = vec![0.3, 0.6, 0.45, 0.5][..m.latent_dim()].to_vec();
            let cond = Conditioning::from_image(&source(), 2).unwrap();
            let z: Vec<f32> = z0.iter().map(|&v| v as f32).collect();
            let raw = m.forward_batch(&z, None, &cond).unwrap();
            let target = ImageBuffer::from_pixels(12, 9, raw.clone()).unwrap();
            assert_eq!(target.pixels(), raw.as_slice(), "target must not be clamped");
            let style = extract_style(&m, &source(), &target, "f").unwrap();
            for (a, b) in style.values().iter().zip(&z0) {
                assert!((a - b).abs() < 1e-3, "{variant:?}: {a} vs {b}");
            }
            assert_eq!(style.provenance(), &Provenance::Extracted { frame: "f".into() });
        }
    }

    #[test]
    fn apply_output_is_clamped() {
        let m = model(Variant::Dim3);
        let style = StyleVector::manual(vec![5.0, -5.0, 5.0]).unwrap();
        let out = apply_style(&m, &source(), &style).unwrap();
        assert!(out.pixels().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dimension_errors() {
        let m = model(Variant::Dim3);
        let style = StyleVector::zero(2).unwrap();
        assert_eq!(
            apply_style(&m, &source(), &style).unwrap_err(),
            StyleError::Dimension { expected: 3, got: 2 }
        );
        let small = source().resize_nearest(4, 4).unwrap();
        assert!(matches!(
            extract_style(&m, &source(), &small, "x"),
            Err(StyleError::ImageDimensions { .. })
        ));
        assert!(matches!(StyleVector::manual(vec![1.0]), Err(StyleError::Unsupported(1))));
        assert!(matches!(
            StyleVector::manual(vec![1.0, f64::NAN]),
            Err(StyleError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn record_round_trip() {
        let style = StyleVector::new(vec![0.5, -1.25, 2.0], Provenance::Extracted { frame: "pair0003".into() }).unwrap();
        let json = style.to_record("abc").to_json();
        let back = StyleRecord::from_json(&json).unwrap();
        assert_eq!(back.model_id, "abc");
        assert_eq!(back.to_style().unwrap(), style);
        assert_eq!(StyleVector::manual(vec![0.0, 0.0]).unwrap().provenance(), &Provenance::Zero);
        let bad = r#"{"model_id":"m","dims":3,"values":[1,2],"provenance":{"kind":"manual"}}"#;
        assert!(StyleRecord::from_json(bad).unwrap().to_style().is_err());
    }

    #[test]
    fn grid_layout() {
        let m = model(Variant::Dim3);
        let spec = GridSpec::centered(3, 3);
        let grid = style_grid(&m, &source(), &spec).unwrap();
        assert_eq!(grid.tiles.len(), 9);
        assert_eq!(grid.points[4].values(), &[0.0, 0.0, 0.0]);
        assert_eq!(grid.points[0].values(), &[-2.0, 2.0, 0.0]);
        assert_eq!(grid.points[8].values(), &[2.0, -2.0, 0.0]);
        let zero = apply_style(&m, &source(), &StyleVector::zero(3).unwrap()).unwrap();
        assert_eq!(grid.tile(1, 1), &zero);
        let mosaic = grid.mosaic().unwrap();
        assert_eq!(mosaic.dims(), (36, 27));

        let one = GridSpec {
            center: vec![0.4, 0.1, -0.3],
            resolution: 1,
            ..spec.clone()
        };
        let grid = style_grid(&m, &source(), &one).unwrap();
        let direct = apply_style(&m, &source(), &StyleVector::manual(vec![0.4, 0.1, -0.3]).unwrap()).unwrap();
        assert_eq!(grid.tiles[0], direct);

        for bad in [
            GridSpec { axes: (1, 1), ..spec.clone() },
            GridSpec { axes: (0, 3), ..spec.clone() },
            GridSpec { resolution: 0, ..spec.clone() },
            GridSpec { center: vec![0.0; 2], ..spec.clone() },
        ] {
            assert!(style_grid(&m, &source(), &bad).is_err());
        }
    }

    #[test]
    fn thumbnails_keep_aspect() {
        let m = model(Variant::Dim2Split);
        let spec = GridSpec {
            thumb_width: Some(6),
            ..GridSpec::centered(2, 2)
        };
        let grid = style_grid(&m, &source(), &spec).unwrap();
        assert!(grid.tiles.iter().all(|t| t.dims() == (6, 5)));
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..60 {
            let c = i % 3;
            let base = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]][c];
            points.push(vec![base[0] + rng.random::<f64>(), base[1] + rng.random::<f64>()]);
            labels.push(c);
        }
        let assign = kmeans(&points, 3, 5, 0);
        assert_eq!(cluster_purity(&assign, &labels), 1.0);
        assert!((cluster_purity(&[0, 0, 0, 0], &[0, 0, 1, 1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn style_map_counts() {
        let m = model(Variant::Dim3);
        let pair = ImagePair::new("a", source(), source()).unwrap();
        let map = dataset_style_map(&m, "id", &[pair.clone(), ImagePair { id: "b".into(), ..pair.clone() }]).unwrap();
        assert_eq!(map.entries.len(), 2);
        assert_eq!(map.entries[0].values, map.entries[1].values);
        let direct = extract_style(&m, &pair.source, &pair.target, "a").unwrap();
        assert_eq!(map.entries[0].values, direct.values());
    }
}
