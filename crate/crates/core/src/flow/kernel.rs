//! Dense-layer kernels over one chunk of pixels.
//!
//! Both kernels accumulate `bias` first and then the inputs in order with a
//! fused multiply-add per term, so they agree bit for bit.

use wide::f32x16;

use super::eval::CHUNK;
use crate::Real;

/// Pixels per register tile of the generic kernel.
const LANES: usize = 16;

/// One `Q`-output × `LANES`-pixel tile, accumulated in registers.
#[inline(always)]
fn tile<T: Real, const Q: usize>(w: &[T], n_out: usize, o0: usize, bias: &[T], rows: &[&[T; CHUNK]], p0: usize, out: &mut [[T; CHUNK]]) {
    let mut acc = [[T::zero(); LANES]; Q];
    for q in 0..Q {
        acc[q] = [bias[o0 + q]; LANES];
    }
    for (i, row) in rows.iter().enumerate() {
        let x: &[T; LANES] = row[p0..p0 + LANES].try_into().expect("tile");
        let wi: &[T; Q] = w[i * n_out + o0..i * n_out + o0 + Q].try_into().expect("tile");
        for q in 0..Q {
            for l in 0..LANES {
                acc[q][l] = wi[q].mul_add(x[l], acc[q][l]);
            }
        }
    }
    for q in 0..Q {
        out[o0 + q][p0..p0 + LANES].copy_from_slice(&acc[q]);
    }
}

/// `out[o][p] = bias[o] + Σ_i w[i·n_out + o] · rows[i][p]`, autovectorized.
pub(crate) fn dense_rows_generic<T: Real>(w: &[T], bias: &[T], rows: &[&[T; CHUNK]], out: &mut [[T; CHUNK]]) {
    let n_out = bias.len();
    for p0 in (0..CHUNK).step_by(LANES) {
        let mut o0 = 0;
        while o0 + 4 <= n_out {
            tile::<T, 4>(w, n_out, o0, bias, rows, p0, out);
            o0 += 4;
        }
        while o0 + 2 <= n_out {
            tile::<T, 2>(w, n_out, o0, bias, rows, p0, out);
            o0 += 2;
        }
        while o0 < n_out {
            tile::<T, 1>(w, n_out, o0, bias, rows, p0, out);
            o0 += 1;
        }
    }
}

const V: usize = 16;
const VECS: usize = CHUNK / V;

#[inline(always)]
fn load(row: &[f32; CHUNK], v: usize) -> f32x16 {
    let x: [f32; V] = row[v * V..(v + 1) * V].try_into().expect("vector");
    f32x16::from(x)
}

/// A `Q`-output tile spanning the whole chunk.
#[inline(always)]
fn tile_f32<const Q: usize>(w: &[f32], n_out: usize, o0: usize, bias: &[f32], rows: &[&[f32; CHUNK]], out: &mut [[f32; CHUNK]]) {
    let mut acc = [[f32x16::ZERO; VECS]; Q];
    for q in 0..Q {
        acc[q] = [f32x16::splat(bias[o0 + q]); VECS];
    }
    for (i, row) in rows.iter().enumerate() {
        let x: [f32x16; VECS] = std::array::from_fn(|v| load(row, v));
        let wi = &w[i * n_out + o0..i * n_out + o0 + Q];
        for q in 0..Q {
            let wq = f32x16::splat(wi[q]);
            for v in 0..VECS {
                acc[q][v] = wq.mul_add(x[v], acc[q][v]);
            }
        }
    }
    for q in 0..Q {
        for v in 0..VECS {
            out[o0 + q][v * V..(v + 1) * V].copy_from_slice(&acc[q][v].to_array());
        }
    }
}

/// [`dense_rows_generic`] on explicit 16-lane vectors.
pub(crate) fn dense_rows_f32(w: &[f32], bias: &[f32], rows: &[&[f32; CHUNK]], out: &mut [[f32; CHUNK]]) {
    let n_out = bias.len();
    let mut o0 = 0;
    while o0 + 4 <= n_out {
        tile_f32::<4>(w, n_out, o0, bias, rows, out);
        o0 += 4;
    }
    while o0 + 2 <= n_out {
        tile_f32::<2>(w, n_out, o0, bias, rows, out);
        o0 += 2;
    }
    while o0 < n_out {
        tile_f32::<1>(w, n_out, o0, bias, rows, out);
        o0 += 1;
    }
}
