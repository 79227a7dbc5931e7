//! Tape-free evaluation over pixel chunks.
//!
//! Pixels are processed `CHUNK` at a time in a feature-major layout: every
//! feature of a chunk is one contiguous `[T; CHUNK]` row, so the dense-layer
//! kernels run a fused multiply-add across contiguous pixels. Chunks are
//! independent and run in parallel; reductions over chunks are summed in
//! chunk order so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Block, FlowError, FlowModel, LatentResult, MlpIds};
use crate::imaging::ImageBuffer;
use crate::pcc::{basis_into, basis_len};
use crate::Real;

/// Pixels per evaluation chunk.
pub const CHUNK: usize = 64;

type Row<T> = [T; CHUNK];

fn zero_row<T: Real>() -> Row<T> {
    [T::zero(); CHUNK]
}

/// Per-pixel PCC basis, stored chunk-major for the evaluator.
///
/// It does not depend on the style vector, so a frame's conditioning can be
/// computed once and reused for every rendering of that frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<T = f32> {
    degree: u8,
    basis_len: usize,
    pixels: usize,
    rows: Vec<Row<T>>,
}

impl<T: Real> Conditioning<T> {
    pub fn from_pixels(pixels: &[[T; 3]], degree: u8) -> Result<Self, FlowError> {
        let len = basis_len(degree)?;
        let rows = pixels
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let mut out = vec![zero_row::<T>(); len];
                let mut basis = vec![T::zero(); len];
                for (p, &px) in chunk.iter().enumerate() {
                    basis_into(px, &mut basis);
                    for (row, &v) in out.iter_mut().zip(&basis) {
                        row[p] = v;
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            degree,
            basis_len: len,
            pixels: pixels.len(),
            rows,
        })
    }

    pub fn from_image(image: &ImageBuffer, degree: u8) -> Result<Self, FlowError> {
        let pixels: Vec<[T; 3]> = image.pixels().iter().map(|p| p.map(|v| T::lit(v as f64))).collect();
        Self::from_pixels(&pixels, degree)
    }

    /// Wraps precomputed basis vectors, one per pixel.
    pub fn from_vectors(vectors: &[Vec<T>], degree: u8) -> Result<Self, FlowError> {
        let len = basis_len(degree)?;
        let mut rows = Vec::with_capacity(vectors.len().div_ceil(CHUNK) * len);
        for chunk in vectors.chunks(CHUNK) {
            let mut out = vec![zero_row::<T>(); len];
            for (p, v) in chunk.iter().enumerate() {
                if v.len() != len {
                    return Err(FlowError::ConditioningLength {
                        expected: len,
                        got: v.len(),
                    });
                }
                for (row, &x) in out.iter_mut().zip(v) {
                    row[p] = x;
                }
            }
            rows.extend(out);
        }
        Ok(Self {
            degree,
            basis_len: len,
            pixels: vectors.len(),
            rows,
        })
    }

    pub fn degree(&self) -> u8 {
        self.degree
    }

    pub fn basis_len(&self) -> usize {
        self.basis_len
    }

    /// Number of pixels covered.
    pub fn len(&self) -> usize {
        self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.pixels == 0
    }

    pub fn num_chunks(&self) -> usize {
        self.pixels.div_ceil(CHUNK)
    }

    fn chunk(&self, k: usize) -> &[Row<T>] {
        &self.rows[k * self.basis_len..(k + 1) * self.basis_len]
    }

    /// The basis vector of pixel `i`.
    pub fn vector(&self, i: usize) -> Vec<T> {
        let (k, p) = (i / CHUNK, i % CHUNK);
        self.chunk(k).iter().map(|row| row[p]).collect()
    }

    pub fn memory_bytes(&self) -> usize {
        self.rows.len() * std::mem::size_of::<Row<T>>()
    }
}

/// Discriminative-pass output for a batch; `z` is row-major `n × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLatents<T = f32> {
    pub dim: usize,
    pub z: Vec<T>,
    pub split: Option<Vec<T>>,
    pub log_det: Vec<T>,
}

impl<T: Real> BatchLatents<T> {
    pub fn len(&self) -> usize {
        self.log_det.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_det.is_empty()
    }

    pub fn latent(&self, i: usize) -> &[T] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }
}

/// `out[o] = act(bias[o] + Σ_i w[i, o] · input_i)` with the inputs being the
/// rows of `a` followed by the rows of `c`.
fn dense<T: Real>(w: &[T], bias: &[T], a: &[Row<T>], c: &[Row<T>], slope: Option<T>, out: &mut Vec<Row<T>>) {
    let n_out = bias.len();
    let rows: Vec<&Row<T>> = a.iter().chain(c).collect();
    out.clear();
    out.resize(n_out, zero_row());
    T::dense_rows(w, bias, &rows, out);
    if let Some(slope) = slope {
        for row in out.iter_mut() {
            for v in row.iter_mut() {
                if *v < T::zero() {
                    *v = *v * slope;
                }
            }
        }
    }
}

#[derive(Default)]
struct Scratch<T> {
    h1: Vec<Row<T>>,
    h2: Vec<Row<T>>,
    s: Vec<Row<T>>,
    t: Vec<Row<T>>,
}

impl<T: Real> Scratch<T> {
    fn new() -> Self {
        Self {
            h1: Vec::new(),
            h2: Vec::new(),
            s: Vec::new(),
            t: Vec::new(),
        }
    }
}

impl<T: Real> FlowModel<T> {
    fn mlp(&self, ids: &MlpIds, u1: &[Row<T>], cond: &[Row<T>], h1: &mut Vec<Row<T>>, h2: &mut Vec<Row<T>>, out: &mut Vec<Row<T>>) {
        let p = &self.params;
        let slope = Some(T::lit(self.config.leaky_slope));
        dense(p.get(ids.w1).data(), p.get(ids.b1).data(), u1, cond, slope, h1);
        dense(p.get(ids.w2).data(), p.get(ids.b2).data(), h1, &[], slope, h2);
        dense(p.get(ids.w3).data(), p.get(ids.b3).data(), h2, &[], None, out);
    }

    /// Clamped log-scales `ŝ` into `sc.s` and shifts into `sc.t`.
    fn coupling_terms(&self, block: &Block, u1: &[Row<T>], cond: &[Row<T>], sc: &mut Scratch<T>) {
        self.mlp(&block.s_net, u1, cond, &mut sc.h1, &mut sc.h2, &mut sc.s);
        self.mlp(&block.t_net, u1, cond, &mut sc.h1, &mut sc.h2, &mut sc.t);
        let s_max = T::lit(self.config.s_max);
        let inv = T::one() / s_max;
        for row in sc.s.iter_mut() {
            for v in row.iter_mut() {
                *v = s_max * (*v * inv).tanh_kernel();
            }
        }
    }

    fn coupling_fwd_chunk(&self, block: &Block, state: &mut [Row<T>], cond: &[Row<T>], log_det: &mut Row<T>, sc: &mut Scratch<T>) {
        let n1 = block.split.0;
        let (u1, u2) = state.split_at_mut(n1);
        self.coupling_terms(block, u1, cond, sc);
        for ((u, s), t) in u2.iter_mut().zip(&sc.s).zip(&sc.t) {
            for p in 0..CHUNK {
                u[p] = u[p].mul_add(s[p].exp_kernel(), t[p]);
                log_det[p] = log_det[p] + s[p];
            }
        }
    }

    fn coupling_inv_chunk(&self, block: &Block, state: &mut [Row<T>], cond: &[Row<T>], log_det: &mut Row<T>, sc: &mut Scratch<T>) {
        let n1 = block.split.0;
        let (v1, v2) = state.split_at_mut(n1);
        self.coupling_terms(block, v1, cond, sc);
        for ((v, s), t) in v2.iter_mut().zip(&sc.s).zip(&sc.t) {
            for p in 0..CHUNK {
                v[p] = (v[p] - t[p]) * (-s[p]).exp_kernel();
                log_det[p] = log_det[p] - s[p];
            }
        }
    }

    fn actnorm_fwd_chunk(&self, block: &Block, state: &mut [Row<T>], log_det: &mut Row<T>) {
        let logs = self.params.get(block.logs).data();
        let bias = self.params.get(block.bias).data();
        let total: T = logs.iter().copied().sum();
        for (ch, row) in state.iter_mut().enumerate() {
            let (scale, b) = (logs[ch].exp(), bias[ch]);
            for v in row.iter_mut() {
                *v = v.mul_add(scale, b);
            }
        }
        for v in log_det.iter_mut() {
            *v = *v + total;
        }
    }

    fn actnorm_inv_chunk(&self, block: &Block, state: &mut [Row<T>], log_det: &mut Row<T>) {
        let logs = self.params.get(block.logs).data();
        let bias = self.params.get(block.bias).data();
        let total: T = logs.iter().copied().sum();
        for (ch, row) in state.iter_mut().enumerate() {
            let (scale, b) = ((-logs[ch]).exp(), bias[ch]);
            for v in row.iter_mut() {
                *v = (*v - b) * scale;
            }
        }
        for v in log_det.iter_mut() {
            *v = *v - total;
        }
    }

    /// Pixel to latent over one chunk. `state` holds the input channels and
    /// is left holding the final latent channels; the split-off channel, if
    /// any, is returned.
    fn inverse_chunk(&self, state: &mut Vec<Row<T>>, cond: &[Row<T>], log_det: &mut Row<T>, sc: &mut Scratch<T>) -> Option<Row<T>> {
        let mut split = None;
        let mut tmp = Vec::with_capacity(state.len());
        for (b, block) in self.blocks.iter().enumerate() {
            self.coupling_fwd_chunk(block, state, cond, log_det, sc);
            tmp.clear();
            tmp.extend(block.perm.iter().map(|&p| state[p]));
            std::mem::swap(state, &mut tmp);
            self.actnorm_fwd_chunk(block, state, log_det);
            if self.config.split_after() == Some(b + 1) {
                split = state.pop();
            }
        }
        split
    }

    /// Latent to pixel over one chunk; the inverse of [`Self::inverse_chunk`].
    fn forward_chunk(&self, state: &mut Vec<Row<T>>, split: Option<&Row<T>>, cond: &[Row<T>], log_det: &mut Row<T>, sc: &mut Scratch<T>) {
        let mut tmp = Vec::with_capacity(state.len() + 1);
        for (b, block) in self.blocks.iter().enumerate().rev() {
            if self.config.split_after() == Some(b + 1) {
                state.push(split.copied().unwrap_or_else(zero_row));
            }
            self.actnorm_inv_chunk(block, state, log_det);
            tmp.clear();
            tmp.extend(block.inv_perm.iter().map(|&p| state[p]));
            std::mem::swap(state, &mut tmp);
            self.coupling_inv_chunk(block, state, cond, log_det, sc);
        }
    }

    fn check_conditioning(&self, cond: &Conditioning<T>, pixels: usize) -> Result<(), FlowError> {
        self.require_ready()?;
        if cond.degree() != self.config.degree {
            return Err(FlowError::ConditioningDegree {
                expected: self.config.degree,
                got: cond.degree(),
            });
        }
        if cond.len() != pixels {
            return Err(FlowError::PixelCount(pixels, cond.len()));
        }
        if pixels == 0 {
            return Err(FlowError::EmptyBatch);
        }
        Ok(())
    }

    fn load_inputs(&self, pixels: &[[T; 3]], aug: Option<&[T]>, start: usize) -> Vec<Row<T>> {
        let width = self.config.variant.input_width();
        let mut state = vec![zero_row::<T>(); width];
        let end = (start + CHUNK).min(pixels.len());
        for (p, px) in pixels[start..end].iter().enumerate() {
            for c in 0..3 {
                state[c][p] = px[c];
            }
            if width == 4 {
                if let Some(a) = aug {
                    state[3][p] = a[start + p];
                }
            }
        }
        state
    }

    /// Runs the discriminative pass on every pixel.
    ///
    /// `aug` supplies the augmentation channel of the 4-D variant (zeros if
    /// absent) and is ignored by the other variants.
    pub fn inverse_batch(&self, pixels: &[[T; 3]], cond: &Conditioning<T>, aug: Option<&[T]>) -> Result<BatchLatents<T>, FlowError> {
        self.check_conditioning(cond, pixels.len())?;
        if let Some(a) = aug {
            if a.len() != pixels.len() {
                return Err(FlowError::Dimension {
                    expected: pixels.len(),
                    got: a.len(),
                });
            }
        }
        let dim = self.latent_dim();
        let has_split = self.config.split_after().is_some();
        let n = pixels.len();
        let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..cond.num_chunks())
            .into_par_iter()
            .map(|k| {
                let start = k * CHUNK;
                let valid = CHUNK.min(n - start);
                let mut state = self.load_inputs(pixels, aug, start);
                let mut log_det = zero_row();
                let mut sc = Scratch::new();
                let split = self.inverse_chunk(&mut state, cond.chunk(k), &mut log_det, &mut sc);
                let mut z = Vec::with_capacity(valid * dim);
                for p in 0..valid {
                    z.extend(state.iter().map(|row| row[p]));
                }
                let split = split.map(|s| s[..valid].to_vec()).unwrap_or_default();
                (z, split, log_det[..valid].to_vec())
            })
            .collect();
        let mut out = BatchLatents {
            dim,
            z: Vec::with_capacity(n * dim),
            split: has_split.then(|| Vec::with_capacity(n)),
            log_det: Vec::with_capacity(n),
        };
        for (z, split, ld) in parts {
            out.z.extend(z);
            if let Some(s) = out.split.as_mut() {
                s.extend(split);
            }
            out.log_det.extend(ld);
        }
        if !out.z.iter().chain(&out.log_det).all(|v| v.is_finite()) {
            return Err(FlowError::NonFinite("discriminative pass"));
        }
        Ok(out)
    }

    /// Runs the generative pass.
    ///
    /// `z` is either one latent shared by all pixels or one per pixel
    /// (row-major). `split` likewise gives the split-off channel of the 2-D
    /// variant, defaulting to 0. Returns every input channel, including the
    /// augmentation channel of the 4-D variant, row-major.
    pub fn forward_channels_batch(&self, z: &[T], split: Option<&[T]>, cond: &Conditioning<T>) -> Result<Vec<T>, FlowError> {
        let n = cond.len();
        self.check_conditioning(cond, n)?;
        let dim = self.latent_dim();
        let shared = z.len() == dim;
        if !shared && z.len() != n * dim {
            return Err(FlowError::Dimension {
                expected: dim,
                got: z.len(),
            });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(FlowError::NonFinite("style vector"));
        }
        let split_shared = match split {
            Some(s) if s.len() == 1 => true,
            Some(s) if s.len() == n => false,
            None => true,
            Some(s) => {
                return Err(FlowError::Dimension {
                    expected: n,
                    got: s.len(),
                })
            }
        };
        let width = self.config.variant.input_width();
        let parts: Vec<Vec<T>> = (0..cond.num_chunks())
            .into_par_iter()
            .map(|k| {
                let start = k * CHUNK;
                let valid = CHUNK.min(n - start);
                let mut state = vec![zero_row::<T>(); dim];
                for (d, row) in state.iter_mut().enumerate() {
                    if shared {
                        *row = [z[d]; CHUNK];
                    } else {
                        for p in 0..valid {
                            row[p] = z[(start + p) * dim + d];
                        }
                    }
                }
                let split_row = split.map(|s| {
                    let mut row = zero_row::<T>();
                    for p in 0..valid {
                        row[p] = if split_shared { s[0] } else { s[start + p] };
                    }
                    row
                });
                let mut log_det = zero_row();
                let mut sc = Scratch::new();
                self.forward_chunk(&mut state, split_row.as_ref(), cond.chunk(k), &mut log_det, &mut sc);
                let mut out = Vec::with_capacity(valid * width);
                for p in 0..valid {
                    out.extend(state.iter().map(|row| row[p]));
                }
                out
            })
            .collect();
        let out: Vec<T> = parts.concat();
        if !out.iter().all(|v| v.is_finite()) {
            return Err(FlowError::NonFinite("generative pass"));
        }
        Ok(out)
    }

    /// Generative pass returning RGB pixels (unclamped).
    pub fn forward_batch(&self, z: &[T], split: Option<&[T]>, cond: &Conditioning<T>) -> Result<Vec<[T; 3]>, FlowError> {
        let width = self.config.variant.input_width();
        let flat = self.forward_channels_batch(z, split, cond)?;
        Ok(flat.chunks_exact(width).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Mean latent over all pixels (augmentation channel 0), accumulated in
    /// `f64` in a fixed order.
    pub fn mean_latent(&self, pixels: &[[T; 3]], cond: &Conditioning<T>) -> Result<Vec<f64>, FlowError> {
        self.check_conditioning(cond, pixels.len())?;
        let dim = self.latent_dim();
        let n = pixels.len();
        let partial: Vec<Vec<f64>> = (0..cond.num_chunks())
            .into_par_iter()
            .map(|k| {
                let start = k * CHUNK;
                let valid = CHUNK.min(n - start);
                let mut state = self.load_inputs(pixels, None, start);
                let mut log_det = zero_row();
                let mut sc = Scratch::new();
                self.inverse_chunk(&mut state, cond.chunk(k), &mut log_det, &mut sc);
                state
                    .iter()
                    .map(|row| row[..valid].iter().map(|v| v.to_f64_lossy()).sum())
                    .collect()
            })
            .collect();
        let mut sum = vec![0.0f64; dim];
        for part in partial {
            for (s, v) in sum.iter_mut().zip(part) {
                *s += v;
            }
        }
        let mean: Vec<f64> = sum.into_iter().map(|s| s / n as f64).collect();
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(FlowError::NonFinite("mean latent"));
        }
        Ok(mean)
    }

    fn single_cond(&self, c: &[T]) -> Result<Conditioning<T>, FlowError> {
        let expected = self.conditioning_len();
        if c.len() != expected {
            return Err(FlowError::ConditioningLength {
                expected,
                got: c.len(),
            });
        }
        Conditioning::from_vectors(&[c.to_vec()], self.config.degree)
    }

    /// Discriminative pass on one pixel given all input channels
    /// (RGB, plus the augmentation channel for the 4-D variant).
    pub fn inverse_channels(&self, x: &[T], c: &[T]) -> Result<LatentResult<T>, FlowError> {
        let width = self.config.variant.input_width();
        if x.len() != width {
            return Err(FlowError::Dimension {
                expected: width,
                got: x.len(),
            });
        }
        let cond = self.single_cond(c)?;
        let aug = (width == 4).then(|| [x[3]]);
        let b = self.inverse_batch(&[[x[0], x[1], x[2]]], &cond, aug.as_ref().map(|a| &a[..]))?;
        Ok(LatentResult {
            z: b.z,
            split: b.split.map(|s| s[0]),
            log_det: b.log_det[0],
        })
    }

    /// Generative pass on one latent, returning all input channels.
    pub fn forward_channels(&self, z: &[T], split: Option<T>, c: &[T]) -> Result<Vec<T>, FlowError> {
        let cond = self.single_cond(c)?;
        let split = split.map(|s| [s]);
        self.forward_channels_batch(z, split.as_ref().map(|s| &s[..]), &cond)
    }

    /// Pixel to latent. The 4-D variant needs the augmentation channel;
    /// `None` means 0.
    pub fn flow_inverse(&self, x: [T; 3], c: &[T], aug: Option<T>) -> Result<LatentResult<T>, FlowError> {
        let mut channels = x.to_vec();
        if self.config.variant.input_width() == 4 {
            channels.push(aug.unwrap_or_else(T::zero));
        }
        self.inverse_channels(&channels, c)
    }

    /// Latent to pixel, unclamped. The split-off channel of the 2-D variant
    /// defaults to 0.
    pub fn flow_forward(&self, z: &[T], split: Option<T>, c: &[T]) -> Result<[T; 3], FlowError> {
        let out = self.forward_channels(z, split, c)?;
        Ok([out[0], out[1], out[2]])
    }

    fn one_block(&self, index: usize, u: &[T], c: &[T], forward: bool) -> Result<(Vec<T>, T), FlowError> {
        let block = self.block(index)?;
        if u.len() != block.width {
            return Err(FlowError::Dimension {
                expected: block.width,
                got: u.len(),
            });
        }
        let cond = self.single_cond(c)?;
        let mut state: Vec<Row<T>> = u
            .iter()
            .map(|&v| {
                let mut r = zero_row();
                r[0] = v;
                r
            })
            .collect();
        let mut log_det = zero_row();
        let mut sc = Scratch::new();
        if forward {
            self.coupling_fwd_chunk(block, &mut state, cond.chunk(0), &mut log_det, &mut sc);
        } else {
            self.coupling_inv_chunk(block, &mut state, cond.chunk(0), &mut log_det, &mut sc);
        }
        let v: Vec<T> = state.iter().map(|r| r[0]).collect();
        if !v.iter().all(|x| x.is_finite()) || !log_det[0].is_finite() {
            return Err(FlowError::NonFinite("coupling"));
        }
        Ok((v, log_det[0]))
    }

    /// The affine coupling of block `index`, pixel-to-latent direction:
    /// `v2 = u2 · exp(ŝ) + t`, returning `Σ ŝ` as the log-determinant.
    pub fn coupling_forward(&self, index: usize, u: &[T], c: &[T]) -> Result<(Vec<T>, T), FlowError> {
        self.one_block(index, u, c, true)
    }

    /// Inverse of [`Self::coupling_forward`]; the log-determinant is `−Σ ŝ`.
    pub fn coupling_inverse(&self, index: usize, v: &[T], c: &[T]) -> Result<(Vec<T>, T), FlowError> {
        self.one_block(index, v, c, false)
    }

    /// Data-dependent ActNorm initialization: each ActNorm is set so that
    /// its output on this batch has zero mean and unit variance per channel.
    pub fn init_actnorm(&mut self, pixels: &[[T; 3]], cond: &Conditioning<T>, aug: Option<&[T]>) -> Result<(), FlowError> {
        if cond.len() != pixels.len() {
            return Err(FlowError::PixelCount(pixels.len(), cond.len()));
        }
        if pixels.len() < 2 {
            return Err(FlowError::EmptyBatch);
        }
        let n = pixels.len();
        let chunks = cond.num_chunks();
        let mut states: Vec<Vec<Row<T>>> = (0..chunks).map(|k| self.load_inputs(pixels, aug, k * CHUNK)).collect();
        let mut sc = Scratch::new();
        let mut scratch_ld = zero_row();
        for b in 0..self.blocks.len() {
            let block = self.blocks[b].clone();
            let mut tmp = Vec::new();
            for (k, state) in states.iter_mut().enumerate() {
                self.coupling_fwd_chunk(&block, state, cond.chunk(k), &mut scratch_ld, &mut sc);
                tmp.clear();
                tmp.extend(block.perm.iter().map(|&p| state[p]));
                std::mem::swap(state, &mut tmp);
            }
            let mut logs = Vec::with_capacity(block.width);
            let mut bias = Vec::with_capacity(block.width);
            for ch in 0..block.width {
                let values = states
                    .iter()
                    .enumerate()
                    .flat_map(|(k, s)| s[ch][..CHUNK.min(n - k * CHUNK)].iter().map(|v| v.to_f64_lossy()));
                let (mut sum, mut sq) = (0.0, 0.0);
                for v in values {
                    sum += v;
                    sq += v * v;
                }
                let mean = sum / n as f64;
                let std = (sq / n as f64 - mean * mean).max(0.0).sqrt().max(ACTNORM_MIN_STD);
                logs.push(T::lit(-std.ln()));
                bias.push(T::lit(-mean / std));
            }
            self.params.get_mut(block.logs).data_mut().copy_from_slice(&logs);
            self.params.get_mut(block.bias).data_mut().copy_from_slice(&bias);
            for state in states.iter_mut() {
                self.actnorm_fwd_chunk(&block, state, &mut scratch_ld);
                if self.config.split_after() == Some(b + 1) {
                    state.pop();
                }
            }
        }
        self.actnorm_ready = true;
        Ok(())
    }
}

/// Lower bound on the per-channel spread used by ActNorm initialization.
pub const ACTNORM_MIN_STD: f64 = 1e-4;
