use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::flow::{kernel, CHUNK};

/// Floating point scalar used throughout the numeric core.
///
/// Training and inference run on `f32`; the gradient and Jacobian oracles run
/// the same generic code on `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    fn lit(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `exp` for inner loops; may trade the last ulp for vectorization.
    #[inline(always)]
    fn exp_kernel(self) -> Self {
        self.exp()
    }

    /// `tanh` for inner loops; may trade the last ulp for vectorization.
    #[inline(always)]
    fn tanh_kernel(self) -> Self {
        self.tanh()
    }

    /// `out[o][p] = bias[o] + Σ_i w[i·n_out + o] · rows[i][p]` over one
    /// evaluation chunk.
    fn dense_rows(w: &[Self], bias: &[Self], rows: &[&[Self; CHUNK]], out: &mut [[Self; CHUNK]]) {
        kernel::dense_rows_generic(w, bias, rows, out)
    }
}

impl Real for f32 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v as f32
    }

    fn dense_rows(w: &[Self], bias: &[Self], rows: &[&[Self; CHUNK]], out: &mut [[Self; CHUNK]]) {
        kernel::dense_rows_f32(w, bias, rows, out)
    }

    /// Range reduction to `r ∈ [-ln2/2, ln2/2]` and a degree-7 Taylor
    /// polynomial; within 2 ulp of `f32::exp` on `[-87, 88]`, branch-free so
    /// loops over it vectorize.
    #[inline(always)]
    fn exp_kernel(self) -> Self {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_145_75;
        const LN2_LO: f32 = 1.428_606_8e-6;
        let x = self.clamp(-87.0, 88.0);
        let k = (x * LOG2E + 0.5).floor();
        let r = (-k).mul_add(LN2_LO, (-k).mul_add(LN2_HI, x));
        let mut p = 1.0 / 5040.0;
        p = p.mul_add(r, 1.0 / 720.0);
        p = p.mul_add(r, 1.0 / 120.0);
        p = p.mul_add(r, 1.0 / 24.0);
        p = p.mul_add(r, 1.0 / 6.0);
        p = p.mul_add(r, 0.5);
        p = p.mul_add(r, 1.0);
        p = p.mul_add(r, 1.0);
        let scale = f32::from_bits(((k as i32 + 127) as u32) << 23);
        // overflow must stay visible to the non-finite checks
        if self > 88.72 {
            f32::INFINITY
        } else {
            p * scale
        }
    }

    #[inline(always)]
    fn tanh_kernel(self) -> Self {
        let e = (-2.0 * self.abs()).exp_kernel();
        ((1.0 - e) / (1.0 + e)).copysign(self)
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v
    }
}
