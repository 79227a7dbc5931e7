//! The flow recorded on an autodiff tape, for training.
//!
//! Pixels are rows: inputs are `K × width` and the conditioning is `K × L`.

use super::{Block, FlowError, FlowModel, MlpIds};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor2D, Var};
use crate::Real;

/// Tape handles of every parameter, recorded once per step.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }
}

pub fn record_params<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>) -> ParamVars {
    ParamVars(store.ids().map(|id| tape.param(store, id)).collect())
}

/// Discriminative-pass nodes: `z` is `K × dim`, `split` and `log_det` are
/// `K × 1`.
#[derive(Clone, Copy, Debug)]
pub struct GraphLatents {
    pub z: Var,
    pub split: Option<Var>,
    pub log_det: Var,
}

impl<T: Real> FlowModel<T> {
    fn mlp_graph(&self, tape: &mut Tape<T>, pv: &ParamVars, ids: &MlpIds, input: Var) -> Result<Var, FlowError> {
        let slope = self.config.leaky_slope;
        let mut h = input;
        for (w, b, act) in [(ids.w1, ids.b1, true), (ids.w2, ids.b2, true), (ids.w3, ids.b3, false)] {
            let lin = tape.matmul(h, pv.get(w))?;
            h = tape.add(lin, pv.get(b))?;
            if act {
                h = tape.leaky_relu(h, slope)?;
            }
        }
        Ok(h)
    }

    /// `(ŝ, t)` for the untouched half `x1`.
    fn coupling_terms_graph(&self, tape: &mut Tape<T>, pv: &ParamVars, block: &Block, x1: Var, cond: Var) -> Result<(Var, Var), FlowError> {
        let input = tape.concat_cols(&[x1, cond])?;
        let raw = self.mlp_graph(tape, pv, &block.s_net, input)?;
        let s_max = self.config.s_max;
        let scaled = tape.scale(raw, 1.0 / s_max)?;
        let squashed = tape.tanh(scaled)?;
        let s = tape.scale(squashed, s_max)?;
        let t = self.mlp_graph(tape, pv, &block.t_net, input)?;
        Ok((s, t))
    }

    fn accumulate(tape: &mut Tape<T>, acc: Option<Var>, term: Var) -> Result<Var, FlowError> {
        Ok(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        })
    }

    /// Pixel to latent. `x` carries every input channel of the variant.
    pub fn inverse_graph(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var, cond: Var) -> Result<GraphLatents, FlowError> {
        self.require_ready()?;
        let (rows, width) = tape.shape(x);
        self.check_graph_inputs(tape, rows, width, self.config.variant.input_width(), cond)?;
        let mut v = x;
        let mut log_det: Option<Var> = None;
        let mut split = None;
        for (b, block) in self.blocks.iter().enumerate() {
            let (n1, n2) = block.split;
            let u1 = tape.slice_cols(v, 0, n1)?;
            let u2 = tape.slice_cols(v, n1, n2)?;
            let (s, t) = self.coupling_terms_graph(tape, pv, block, u1, cond)?;
            let es = tape.exp(s)?;
            let scaled = tape.mul(u2, es)?;
            let v2 = tape.add(scaled, t)?;
            v = tape.concat_cols(&[u1, v2])?;
            let s_sum = tape.sum_cols(s)?;
            log_det = Some(Self::accumulate(tape, log_det, s_sum)?);

            v = tape.permute_cols(v, &block.perm)?;

            let logs = pv.get(block.logs);
            let scale = tape.exp(logs)?;
            let scaled = tape.mul(v, scale)?;
            v = tape.add(scaled, pv.get(block.bias))?;
            let logs_sum = tape.sum(logs)?;
            log_det = Some(Self::accumulate(tape, log_det, logs_sum)?);

            if self.config.split_after() == Some(b + 1) {
                let w = block.width;
                split = Some(tape.slice_cols(v, w - 1, 1)?);
                v = tape.slice_cols(v, 0, w - 1)?;
            }
        }
        let log_det = log_det.expect("at least one block");
        // a model whose last block is all ActNorm can leave log_det as 1 × 1
        let log_det = if tape.shape(log_det).0 == rows {
            log_det
        } else {
            tape.broadcast_rows(log_det, rows)?
        };
        Ok(GraphLatents { z: v, split, log_det })
    }

    /// Latent to pixel, returning every input channel. A missing `split`
    /// channel is taken as 0.
    pub fn forward_graph(&self, tape: &mut Tape<T>, pv: &ParamVars, z: Var, split: Option<Var>, cond: Var) -> Result<Var, FlowError> {
        self.require_ready()?;
        let (rows, width) = tape.shape(z);
        self.check_graph_inputs(tape, rows, width, self.latent_dim(), cond)?;
        let mut v = z;
        for (b, block) in self.blocks.iter().enumerate().rev() {
            if self.config.split_after() == Some(b + 1) {
                let s = match split {
                    Some(s) => s,
                    None => tape.constant(Tensor2D::zeros(rows, 1)),
                };
                v = tape.concat_cols(&[v, s])?;
            }
            let shifted = tape.sub(v, pv.get(block.bias))?;
            let neg = tape.neg(pv.get(block.logs))?;
            let inv_scale = tape.exp(neg)?;
            v = tape.mul(shifted, inv_scale)?;

            v = tape.permute_cols(v, &block.inv_perm)?;

            let (n1, n2) = block.split;
            let v1 = tape.slice_cols(v, 0, n1)?;
            let v2 = tape.slice_cols(v, n1, n2)?;
            let (s, t) = self.coupling_terms_graph(tape, pv, block, v1, cond)?;
            let diff = tape.sub(v2, t)?;
            let neg_s = tape.neg(s)?;
            let es = tape.exp(neg_s)?;
            let u2 = tape.mul(diff, es)?;
            v = tape.concat_cols(&[v1, u2])?;
        }
        Ok(v)
    }

    fn check_graph_inputs(&self, tape: &Tape<T>, rows: usize, width: usize, expected: usize, cond: Var) -> Result<(), FlowError> {
        if width != expected {
            return Err(FlowError::Dimension { expected, got: width });
        }
        let (c_rows, c_cols) = tape.shape(cond);
        if c_cols != self.conditioning_len() {
            return Err(FlowError::ConditioningLength {
                expected: self.conditioning_len(),
                got: c_cols,
            });
        }
        if c_rows != rows {
            return Err(FlowError::PixelCount(rows, c_rows));
        }
        if rows == 0 {
            return Err(FlowError::EmptyBatch);
        }
        Ok(())
    }
}
