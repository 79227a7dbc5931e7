//! Polynomial color correction.
//!
//! A pixel `y = (r, g, b)` is expanded into every monomial `r^a g^b b^c` with
//! `1 ≤ a + b + c ≤ degree` (no constant term). A style matrix `M` maps that
//! expansion to an output color, `x = C(y) · M`. The expansion doubles as the
//! conditioning vector of the flow, so the monomial order is part of the
//! model file format and must never change: degree-major, then
//! lexicographic over the sorted channel indices (`r, g, b, rr, rg, rb, gg,
//! gb, bb, rrr, …`).

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImageBuffer, Pixel};
use crate::Real;

/// Identifier of the monomial ordering written into model files.
pub const MONOMIAL_ORDER_ID: &str = "degree-major-lex-v1";
pub const MAX_DEGREE: u8 = 4;

/// Ridge added to the normal equations of the least-squares fit.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PccError {
    #[error("unsupported polynomial degree {0} (expected 1..=4)")]
    UnsupportedDegree(u8),
    #[error("{sources} source pixels but {targets} target pixels")]
    LengthMismatch { sources: usize, targets: usize },
    #[error("underdetermined fit: {samples} samples for {needed} basis terms")]
    Underdetermined { samples: usize, needed: usize },
    #[error("degenerate samples: the degree-{0} basis is rank deficient on these pixels; try a lower degree")]
    Degenerate(u8),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("style matrix has degree {matrix} but degree {expected} was expected")]
    DegreeMismatch { expected: u8, matrix: u8 },
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("k = {k} must be between 1 and the number of matrices ({n})")]
    InvalidK { k: usize, n: usize },
    #[error("parse error: {0}")]
    Parse(String),
}

/// Number of monomials for `degree`: `C(degree + 3, 3) − 1`.
pub fn basis_len(degree: u8) -> Result<usize, PccError> {
    match degree {
        1 => Ok(3),
        2 => Ok(9),
        3 => Ok(19),
        4 => Ok(34),
        d => Err(PccError::UnsupportedDegree(d)),
    }
}

/// Monomial `i` is `out[parent] · pixel[channel]`, or just `pixel[channel]`
/// for the linear terms. Lower degrees are prefixes of the degree-4 plan.
#[derive(Clone, Copy, Debug)]
struct Term {
    parent: Option<usize>,
    channel: usize,
    last: usize,
}

fn plan() -> &'static [Term] {
    static PLAN: OnceLock<Vec<Term>> = OnceLock::new();
    PLAN.get_or_init(|| {
        let mut terms: Vec<Term> = (0..3)
            .map(|c| Term {
                parent: None,
                channel: c,
                last: c,
            })
            .collect();
        let mut prev = 0..3;
        for _ in 2..=MAX_DEGREE {
            let start = terms.len();
            for p in prev.clone() {
                for c in terms[p].last..3 {
                    terms.push(Term {
                        parent: Some(p),
                        channel: c,
                        last: c,
                    });
                }
            }
            prev = start..terms.len();
        }
        terms
    })
}

/// Human-readable names of the monomials, e.g. `"rgg"`.
pub fn monomial_names(degree: u8) -> Result<Vec<String>, PccError> {
    let len = basis_len(degree)?;
    let terms = plan();
    let mut names: Vec<String> = Vec::with_capacity(len);
    for t in &terms[..len] {
        let mut name = t.parent.map(|p| names[p].clone()).unwrap_or_default();
        name.push(['r', 'g', 'b'][t.channel]);
        names.push(name);
    }
    Ok(names)
}

/// Writes the basis of `pixel` into `out[..basis_len(degree)]`.
///
/// Values outside `[0, 1]` are accepted.
#[inline]
pub fn basis_into<T: Real>(pixel: [T; 3], out: &mut [T]) {
    let terms = plan();
    for i in 0..out.len() {
        let t = terms[i];
        let base = match t.parent {
            Some(p) => out[p],
            None => T::one(),
        };
        out[i] = base * pixel[t.channel];
    }
}

/// The monomial expansion of one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PccBasisVector {
    pub degree: u8,
    pub values: Vec<f64>,
}

pub fn pcc_basis(pixel: [f64; 3], degree: u8) -> Result<PccBasisVector, PccError> {
    let len = basis_len(degree)?;
    if pixel.iter().any(|v| !v.is_finite()) {
        return Err(PccError::NonFinite("pixel"));
    }
    let mut values = vec![0.0; len];
    basis_into(pixel, &mut values);
    Ok(PccBasisVector { degree, values })
}

/// The `basis_len × 3` coefficient matrix of a polynomial color mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMatrix {
    degree: u8,
    /// Row-major, one row per monomial, one column per output channel.
    coefficients: Vec<f64>,
}

impl StyleMatrix {
    pub fn new(degree: u8, coefficients: Vec<f64>) -> Result<Self, PccError> {
        let len = basis_len(degree)?;
        if coefficients.len() != len * 3 {
            return Err(PccError::Dimension {
                expected: len * 3,
                got: coefficients.len(),
            });
        }
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(PccError::NonFinite("style matrix"));
        }
        Ok(Self {
            degree,
            coefficients,
        })
    }

    pub fn zeros(degree: u8) -> Result<Self, PccError> {
        Self::new(degree, vec![0.0; basis_len(degree)? * 3])
    }

    /// Identity on the linear block, zero elsewhere.
    pub fn identity(degree: u8) -> Result<Self, PccError> {
        let mut m = Self::zeros(degree)?;
        for c in 0..3 {
            m.coefficients[c * 3 + c] = 1.0;
        }
        Ok(m)
    }

    pub fn degree(&self) -> u8 {
        self.degree
    }

    pub fn rows(&self) -> usize {
        self.coefficients.len() / 3
    }

    pub fn get(&self, row: usize, channel: usize) -> f64 {
        self.coefficients[row * 3 + channel]
    }

    /// The flattened coefficients, row-major.
    pub fn flat(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn from_flat(degree: u8, flat: &[f64]) -> Result<Self, PccError> {
        Self::new(degree, flat.to_vec())
    }

    /// `C(pixel) · M` without clamping.
    pub fn map_pixel(&self, pixel: [f64; 3]) -> [f64; 3] {
        let mut basis = [0.0f64; 34];
        let basis = &mut basis[..self.rows()];
        basis_into(pixel, basis);
        let mut out = [0.0; 3];
        for (i, &b) in basis.iter().enumerate() {
            let row = &self.coefficients[i * 3..i * 3 + 3];
            for c in 0..3 {
                out[c] += b * row[c];
            }
        }
        out
    }

    /// Plain-text form: a header line, then one `name r g b` line per monomial.
    pub fn to_text(&self) -> String {
        let names = monomial_names(self.degree).expect("validated degree");
        let mut s = format!("style-matrix degree {} order {}\n", self.degree, MONOMIAL_ORDER_ID);
        for (i, name) in names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{name} {:?} {:?} {:?}",
                self.get(i, 0),
                self.get(i, 1),
                self.get(i, 2)
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PccError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| PccError::Parse("empty input".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let degree = match fields.as_slice() {
            ["style-matrix", "degree", d, "order", order] if *order == MONOMIAL_ORDER_ID => d
                .parse::<u8>()
                .map_err(|e| PccError::Parse(format!("degree: {e}")))?,
            _ => return Err(PccError::Parse(format!("bad header `{header}`"))),
        };
        let names = monomial_names(degree)?;
        let mut coefficients = Vec::with_capacity(names.len() * 3);
        for (i, expected) in names.iter().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| PccError::Parse(format!("missing row {i}")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(expected.as_str()) {
                return Err(PccError::Parse(format!("row {i}: expected monomial `{expected}`")));
            }
            for _ in 0..3 {
                let v = it
                    .next()
                    .ok_or_else(|| PccError::Parse(format!("row {i}: missing value")))?;
                coefficients.push(v.parse::<f64>().map_err(|e| PccError::Parse(format!("row {i}: {e}")))?);
            }
        }
        Self::new(degree, coefficients)
    }
}

fn to_f64<T: Real>(p: [T; 3]) -> [f64; 3] {
    [p[0].to_f64_lossy(), p[1].to_f64_lossy(), p[2].to_f64_lossy()]
}

/// Least-squares style matrix minimizing `Σ ‖C(source) · M − target‖²`.
///
/// Solved by a QR factorization of the design matrix stacked on `√RIDGE · I`,
/// i.e. the ridge-regularized normal equations without forming `AᵀA`.
pub fn fit_style_matrix<T: Real>(sources: &[[T; 3]], targets: &[[T; 3]], degree: u8) -> Result<StyleMatrix, PccError> {
    let len = basis_len(degree)?;
    if sources.len() != targets.len() {
        return Err(PccError::LengthMismatch {
            sources: sources.len(),
            targets: targets.len(),
        });
    }
    let n = sources.len();
    if n < len {
        return Err(PccError::Underdetermined {
            samples: n,
            needed: len,
        });
    }
    let rows = n + len;
    let mut design = DMatrix::<f64>::zeros(rows, len);
    let mut rhs = DMatrix::<f64>::zeros(rows, 3);
    let mut basis = vec![0.0f64; len];
    for (i, (&s, &t)) in sources.iter().zip(targets).enumerate() {
        let (s, t) = (to_f64(s), to_f64(t));
        if s.iter().chain(&t).any(|v| !v.is_finite()) {
            return Err(PccError::NonFinite("fit samples"));
        }
        basis_into(s, &mut basis);
        for (j, &b) in basis.iter().enumerate() {
            design[(i, j)] = b;
        }
        for c in 0..3 {
            rhs[(i, c)] = t[c];
        }
    }
    let ridge = RIDGE.sqrt();
    for j in 0..len {
        design[(n + j, j)] = ridge;
    }

    let qr = design.qr();
    let r = qr.r();
    // A diagonal entry this small means the data carry no information along
    // that direction and the ridge alone pins the coefficient.
    if (0..len).any(|j| r[(j, j)].abs() < 2.0 * ridge) {
        return Err(PccError::Degenerate(degree));
    }
    let qt_b = qr.q().transpose() * rhs;
    let solved = r
        .solve_upper_triangular(&qt_b)
        .ok_or(PccError::Degenerate(degree))?;
    let mut coefficients = Vec::with_capacity(len * 3);
    for j in 0..len {
        for c in 0..3 {
            coefficients.push(solved[(j, c)]);
        }
    }
    StyleMatrix::new(degree, coefficients)
}

/// Maps every pixel through `m` and clamps the result to `[0, 1]`.
pub fn apply_style_matrix(image: &ImageBuffer, m: &StyleMatrix) -> ImageBuffer {
    let pixels: Vec<Pixel> = image
        .pixels()
        .par_iter()
        .map(|&p| {
            let out = m.map_pixel(to_f64(p));
            [out[0] as f32, out[1] as f32, out[2] as f32]
        })
        .collect();
    ImageBuffer::from_pixels(image.width(), image.height(), pixels).expect("same dimensions")
}

/// Linear dimensionality reduction of flattened style matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaReducer {
    degree: u8,
    mean: Vec<f64>,
    /// `k` orthonormal directions, each of flattened-matrix length.
    components: Vec<Vec<f64>>,
    /// Variance captured by each component, descending.
    explained_variance: Vec<f64>,
}

impl PcaReducer {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn degree(&self) -> u8 {
        self.degree
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn encode(&self, m: &StyleMatrix) -> Result<Vec<f64>, PccError> {
        if m.degree() != self.degree {
            return Err(PccError::DegreeMismatch {
                expected: self.degree,
                matrix: m.degree(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(m.flat())
                    .zip(&self.mean)
                    .map(|((&d, &x), &mu)| d * (x - mu))
                    .sum()
            })
            .collect())
    }

    pub fn decode(&self, code: &[f64]) -> Result<StyleMatrix, PccError> {
        if code.len() != self.k() {
            return Err(PccError::Dimension {
                expected: self.k(),
                got: code.len(),
            });
        }
        let mut flat = self.mean.clone();
        for (c, &w) in self.components.iter().zip(code) {
            for (f, &d) in flat.iter_mut().zip(c) {
                *f += w * d;
            }
        }
        StyleMatrix::new(self.degree, flat)
    }
}

/// Mean and top-`k` principal directions of the flattened matrices, from the
/// SVD of the centered data.
pub fn pca_fit(matrices: &[StyleMatrix], k: usize) -> Result<PcaReducer, PccError> {
    let n = matrices.len();
    if k == 0 || k > n {
        return Err(PccError::InvalidK { k, n });
    }
    let degree = matrices[0].degree();
    if let Some(m) = matrices.iter().find(|m| m.degree() != degree) {
        return Err(PccError::DegreeMismatch {
            expected: degree,
            matrix: m.degree(),
        });
    }
    let dim = matrices[0].flat().len();
    let mut mean = vec![0.0; dim];
    for m in matrices {
        for (a, &v) in mean.iter_mut().zip(m.flat()) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |i, j| matrices[i].flat()[j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    let denom = (n.max(2) - 1) as f64;
    let candidates = order
        .iter()
        .map(|&i| (v_t.row(i).iter().copied().collect::<Vec<f64>>(), svd.singular_values[i]))
        .chain((0..dim).map(|j| {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            (e, 0.0)
        }));
    for (candidate, sigma) in candidates {
        if components.len() == k {
            break;
        }
        // Gram-Schmidt keeps the basis orthonormal even when the data have
        // rank below k and the trailing singular vectors are arbitrary.
        if let Some(v) = orthonormalize(candidate, &components) {
            explained_variance.push(sigma * sigma / denom);
            components.push(v);
        }
    }
    Ok(PcaReducer {
        degree,
        mean,
        components,
        explained_variance,
    })
}

fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
    let norm = DVector::from_column_slice(&v).norm();
    if norm < 1e-6 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}
