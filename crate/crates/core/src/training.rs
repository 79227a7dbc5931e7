//! Bi-directional training: likelihood of per-pixel latents plus per-frame
//! reconstruction through the centroid latent.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState, Gradients, LrSchedule, OptimError, ParamStore, Tape, Tensor2D, TensorError, Var};
use crate::flow::{record_params, Conditioning, FlowError, FlowModel, GraphLatents, ParamVars};
use crate::imaging::{mse, ImageBuffer, ImagePair, Psnr};
use crate::pcc::basis_into;
use crate::style::{apply_style, extract_style, StyleError};
use crate::Real;

/// Added under the per-pixel square root so its gradient stays finite at an
/// exact reconstruction.
pub const REC_EPS: f64 = 1e-12;

/// Finite stand-in for identical images when averaging PSNR values.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training pairs")]
    EmptyDataset,
    #[error("no pairs to evaluate")]
    EmptySplit,
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Style(#[from] StyleError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub schedule: LrSchedule,
    /// Pixels sampled from a frame per step (`K_s`).
    pub pixels_per_step: usize,
    pub frames_per_batch: usize,
    /// Optimizer steps per epoch; 0 makes an epoch one pass over the
    /// training frames.
    pub steps_per_epoch: usize,
    pub nll_weight: f64,
    pub rec_weight: f64,
    pub seed: u64,
    /// Held-out frames scored after each epoch; 0 scores all of them.
    pub eval_frames: usize,
    /// Pixel cap per frame for the per-epoch scores; 0 uses every pixel.
    pub eval_pixels: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            initial_lr: 5e-4,
            schedule: LrSchedule::default(),
            pixels_per_step: 4096,
            frames_per_batch: 1,
            steps_per_epoch: 0,
            nll_weight: 1.0,
            rec_weight: 1.0,
            seed: 0,
            eval_frames: 16,
            eval_pixels: 16384,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.initial_lr));
        }
        if self.pixels_per_step == 0 || self.frames_per_batch == 0 {
            return bad("pixels per step and frames per batch must be positive".into());
        }
        for (name, w) in [("nll", self.nll_weight), ("reconstruction", self.rec_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("{name} weight must be finite and non-negative, got {w}"));
            }
        }
        if self.nll_weight == 0.0 && self.rec_weight == 0.0 {
            return bad("at least one loss weight must be positive".into());
        }
        if let LrSchedule::Step { factor, .. } = self.schedule {
            if !(factor.is_finite() && factor > 0.0) {
                return bad(format!("schedule factor must be positive, got {factor}"));
            }
        }
        Ok(())
    }
}

/// Metrics of one epoch. PSNR values are per-epoch estimates on pixel
/// subsamples; `None` when the set is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub nll: f64,
    pub rec: f64,
    pub train_psnr: Option<f64>,
    pub held_out_psnr: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned parameters; 0 is the initialized model.
    pub best_epoch: usize,
    pub best_score: Option<f64>,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch records serialize") + "\n")
            .collect()
    }

    /// The report without timings, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.wall_time_s = 0.0;
        }
        r
    }
}

/// `mean(½‖z‖² − log_det)` over the rows of `lat`. A split-off channel
/// counts as part of `z`.
pub fn nll_from_latents<T: Real>(tape: &mut Tape<T>, lat: &GraphLatents) -> Result<Var, TensorError> {
    let sq = tape.square(lat.z)?;
    let mut energy = tape.sum_cols(sq)?;
    if let Some(s) = lat.split {
        let s2 = tape.square(s)?;
        energy = tape.add(energy, s2)?;
    }
    let half = tape.scale(energy, 0.5)?;
    let per_pixel = tape.sub(half, lat.log_det)?;
    tape.mean(per_pixel)
}

/// Mean per-pixel Euclidean error of rendering every pixel from the centroid
/// of `lat.z`. `target` is `K × 3`.
pub fn reconstruction_from_latents<T: Real>(
    tape: &mut Tape<T>,
    model: &FlowModel<T>,
    pv: &ParamVars,
    lat: &GraphLatents,
    target: Var,
    cond: Var,
) -> Result<Var, FlowError> {
    let rows = tape.shape(lat.z).0;
    let centroid = tape.mean_rows(lat.z)?;
    let z = tape.broadcast_rows(centroid, rows)?;
    let out = model.forward_graph(tape, pv, z, None, cond)?;
    let rgb = tape.slice_cols(out, 0, 3)?;
    let diff = tape.sub(rgb, target)?;
    let sq = tape.square(diff)?;
    let sum = tape.sum_cols(sq)?;
    let eps = tape.constant(Tensor2D::scalar(T::lit(REC_EPS)));
    let padded = tape.add(sum, eps)?;
    let norm = tape.sqrt(padded)?;
    Ok(tape.mean(norm)?)
}

/// Likelihood loss of pixels `x` (every input channel, `K × w`).
pub fn nll_loss<T: Real>(tape: &mut Tape<T>, model: &FlowModel<T>, pv: &ParamVars, x: Var, cond: Var) -> Result<Var, FlowError> {
    let lat = model.inverse_graph(tape, pv, x, cond)?;
    Ok(nll_from_latents(tape, &lat)?)
}

/// Reconstruction loss of one frame's pixels `x` (`K × w`, RGB first).
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<T>, model: &FlowModel<T>, pv: &ParamVars, x: Var, cond: Var) -> Result<Var, FlowError> {
    let lat = model.inverse_graph(tape, pv, x, cond)?;
    let target = tape.slice_cols(x, 0, 3)?;
    reconstruction_from_latents(tape, model, pv, &lat, target, cond)
}

/// Loss nodes of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameLosses {
    pub nll: Var,
    pub rec: Var,
    pub total: Var,
}

/// `nll_weight · NLL + rec_weight · rec` sharing one inverse pass. The
/// reconstruction graph is skipped when its weight is 0.
pub fn frame_losses<T: Real>(
    tape: &mut Tape<T>,
    model: &FlowModel<T>,
    pv: &ParamVars,
    x: Var,
    cond: Var,
    nll_weight: f64,
    rec_weight: f64,
) -> Result<FrameLosses, FlowError> {
    let lat = model.inverse_graph(tape, pv, x, cond)?;
    let nll = nll_from_latents(tape, &lat)?;
    let weighted_nll = tape.scale(nll, nll_weight)?;
    if rec_weight == 0.0 {
        let rec = tape.constant(Tensor2D::scalar(T::zero()));
        return Ok(FrameLosses { nll, rec, total: weighted_nll });
    }
    let target = tape.slice_cols(x, 0, 3)?;
    let rec = reconstruction_from_latents(tape, model, pv, &lat, target, cond)?;
    let weighted_rec = tape.scale(rec, rec_weight)?;
    let total = tape.add(weighted_nll, weighted_rec)?;
    Ok(FrameLosses { nll, rec, total })
}

/// Total loss of one frame's batch and its gradient.
pub fn loss_and_grad<T: Real>(model: &FlowModel<T>, batch: &PixelBatch<T>, nll_weight: f64, rec_weight: f64) -> Result<(T, Gradients<T>), FlowError> {
    let mut tape = Tape::new();
    let pv = record_params(&mut tape, model.params());
    let x = tape.constant(batch.x.clone());
    let cond = tape.constant(batch.cond.clone());
    let losses = frame_losses(&mut tape, model, &pv, x, cond, nll_weight, rec_weight)?;
    let value = tape.value(losses.total).item()?;
    let grads = tape.backward(losses.total, model.params())?;
    Ok((value, grads))
}

/// Total loss of one frame's batch, without a backward pass.
pub fn loss_value<T: Real>(model: &FlowModel<T>, batch: &PixelBatch<T>, nll_weight: f64, rec_weight: f64) -> Result<T, FlowError> {
    let mut tape = Tape::new();
    let pv = record_params(&mut tape, model.params());
    let x = tape.constant(batch.x.clone());
    let cond = tape.constant(batch.cond.clone());
    let losses = frame_losses(&mut tape, model, &pv, x, cond, nll_weight, rec_weight)?;
    Ok(tape.value(losses.total).item()?)
}

/// Sampled training pixels of one frame: inputs `K × w` (target RGB plus
/// any augmentation channel) and source conditioning `K × L`.
#[derive(Clone, Debug)]
pub struct PixelBatch<T> {
    pub x: Tensor2D<T>,
    pub cond: Tensor2D<T>,
}

impl<T: Real> PixelBatch<T> {
    /// A batch from explicit rows: `x` is `K × w`, `cond` is `K × L`.
    pub fn new(x: Tensor2D<T>, cond: Tensor2D<T>) -> Self {
        Self { x, cond }
    }

    /// Gathers pixels `indices` of `pair`. `aug` supplies the augmentation
    /// channel of 4-wide models.
    pub fn gather(model: &FlowModel<T>, pair: &ImagePair, indices: &[usize], aug: Option<&[T]>) -> Result<Self, FlowError> {
        let width = model.variant().input_width();
        let len = model.conditioning_len();
        let k = indices.len();
        let (src, tgt) = (pair.source.pixels(), pair.target.pixels());
        let mut x = Tensor2D::zeros(k, width);
        let mut cond = Tensor2D::zeros(k, len);
        for (r, &i) in indices.iter().enumerate() {
            let t = tgt[i];
            let row = x.row_mut(r);
            for c in 0..3 {
                row[c] = T::lit(t[c] as f64);
            }
            if width == 4 {
                row[3] = aug.map_or(T::zero(), |a| a[r]);
            }
            let s = src[i];
            basis_into([T::lit(s[0] as f64), T::lit(s[1] as f64), T::lit(s[2] as f64)], cond.row_mut(r));
        }
        Ok(Self { x, cond })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        (0..n).collect()
    } else {
        let mut idx = index::sample(rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn aug_noise(rng: &mut ChaCha8Rng, model: &FlowModel<f32>, k: usize) -> Option<Vec<f32>> {
    (model.variant().input_width() == 4).then(|| (0..k).map(|_| StandardNormal.sample(rng)).collect())
}

fn regular_subsample(n: usize, cap: usize) -> Vec<usize> {
    if cap == 0 || cap >= n {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

/// PSNR of the centroid reconstruction of `pair`, on at most `max_pixels`
/// regularly spaced pixels (all if 0).
pub fn frame_psnr(model: &FlowModel<f32>, pair: &ImagePair, max_pixels: usize) -> Result<Psnr, TrainError> {
    let idx = regular_subsample(pair.source.len(), max_pixels);
    let src: Vec<[f32; 3]> = idx.iter().map(|&i| pair.source.pixels()[i]).collect();
    let tgt: Vec<[f32; 3]> = idx.iter().map(|&i| pair.target.pixels()[i]).collect();
    let cond = Conditioning::from_pixels(&src, model.degree())?;
    let z: Vec<f32> = model.mean_latent(&tgt, &cond)?.into_iter().map(|v| v as f32).collect();
    let out = model.forward_batch(&z, None, &cond)?;
    let sum: f64 = out
        .iter()
        .zip(&tgt)
        .map(|(o, t)| (0..3).map(|c| (o[c].clamp(0.0, 1.0) as f64 - t[c] as f64).powi(2)).sum::<f64>())
        .sum();
    Ok(Psnr::from_mse(sum / (3 * idx.len()) as f64, 1.0))
}

fn capped(p: Psnr) -> f64 {
    p.db().min(PSNR_CAP_DB)
}

fn subset_score(model: &FlowModel<f32>, pairs: &[ImagePair], frames: usize, pixels: usize) -> Result<Option<f64>, TrainError> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let pick = regular_subsample(pairs.len(), frames);
    let mut sum = 0.0;
    for &i in &pick {
        sum += capped(frame_psnr(model, &pairs[i], pixels)?);
    }
    Ok(Some(sum / pick.len() as f64))
}

fn diverged(epoch: usize, step: usize, detail: impl ToString) -> TrainError {
    TrainError::Diverged {
        epoch,
        step,
        detail: detail.to_string(),
    }
}

/// Trains `model` in place and returns the report. The model ends holding
/// the parameters of the epoch with the best held-out score (training
/// score if `held_out` is empty).
pub fn train(model: &mut FlowModel<f32>, train_pairs: &[ImagePair], held_out: &[ImagePair], config: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_with(model, train_pairs, held_out, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut FlowModel<f32>,
    train_pairs: &[ImagePair],
    held_out: &[ImagePair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    if !model.actnorm_ready() {
        let pair = &train_pairs[0];
        let idx = sample_indices(&mut rng, pair.source.len(), config.pixels_per_step);
        let aug = aug_noise(&mut rng, model, idx.len());
        let src: Vec<[f32; 3]> = idx.iter().map(|&i| pair.source.pixels()[i]).collect();
        let tgt: Vec<[f32; 3]> = idx.iter().map(|&i| pair.target.pixels()[i]).collect();
        let cond = Conditioning::from_pixels(&src, model.degree())?;
        model.init_actnorm(&tgt, &cond, aug.as_deref())?;
    }

    let score = |m: &FlowModel<f32>| -> Result<(Option<f64>, Option<f64>), TrainError> {
        let tr = subset_score(m, train_pairs, config.eval_frames, config.eval_pixels)?;
        let ho = subset_score(m, held_out, config.eval_frames, config.eval_pixels)?;
        Ok((tr, ho))
    };
    let select = |(tr, ho): (Option<f64>, Option<f64>)| if held_out.is_empty() { tr } else { ho };

    let mut report = TrainReport::default();
    let mut best_params: ParamStore<f32> = model.params().clone();
    if config.epochs == 0 {
        report.best_score = select(score(model)?);
        return Ok(report);
    }
    let mut best = f64::NEG_INFINITY;
    let mut adam = AdamState::new(model.params(), config.adam);
    let mut order: Vec<usize> = Vec::new();

    for epoch in 1..=config.epochs {
        let lr = config.schedule.lr_at(config.initial_lr, epoch - 1);
        // an epoch is one or more shuffled passes, cut to `steps_per_epoch`
        let frames_needed = match config.steps_per_epoch {
            0 => train_pairs.len(),
            s => s * config.frames_per_batch,
        };
        order.clear();
        while order.len() < frames_needed {
            let mut pass: Vec<usize> = (0..train_pairs.len()).collect();
            pass.shuffle(&mut rng);
            order.extend(pass);
        }
        order.truncate(frames_needed);
        let (mut nll_sum, mut rec_sum, mut steps) = (0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(config.frames_per_batch).enumerate() {
            let mut tape = Tape::new();
            let pv = record_params(&mut tape, model.params());
            let mut totals = Vec::with_capacity(batch.len());
            let (mut nll_step, mut rec_step) = (0.0, 0.0);
            for &f in batch {
                let pair = &train_pairs[f];
                let idx = sample_indices(&mut rng, pair.source.len(), config.pixels_per_step);
                let aug = aug_noise(&mut rng, model, idx.len());
                let b = PixelBatch::gather(model, pair, &idx, aug.as_deref())?;
                let x = tape.constant(b.x);
                let cond = tape.constant(b.cond);
                let losses = frame_losses(&mut tape, model, &pv, x, cond, config.nll_weight, config.rec_weight)
                    .map_err(|e| diverged(epoch, step, e))?;
                nll_step += tape.value(losses.nll).item()?.to_f64_lossy();
                rec_step += tape.value(losses.rec).item()?.to_f64_lossy();
                totals.push(losses.total);
            }
            let mut total = totals[0];
            for &t in &totals[1..] {
                total = tape.add(total, t)?;
            }
            let total = tape.scale(total, 1.0 / totals.len() as f64)?;
            let value = tape.value(total).item()?.to_f64_lossy();
            if !value.is_finite() {
                return Err(diverged(epoch, step, format!("loss is {value}")));
            }
            let grads = tape.backward(total, model.params())?;
            adam.step(model.params_mut(), &grads, lr).map_err(|e| diverged(epoch, step, e))?;
            nll_sum += nll_step / batch.len() as f64;
            rec_sum += rec_step / batch.len() as f64;
            steps += 1;
        }

        let (train_psnr, held_out_psnr) = score(model)?;
        let record = EpochRecord {
            epoch,
            lr,
            nll: nll_sum / steps as f64,
            rec: rec_sum / steps as f64,
            train_psnr,
            held_out_psnr,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(s) = select((train_psnr, held_out_psnr)) {
            if s > best {
                best = s;
                report.best_epoch = epoch;
                report.best_score = Some(s);
                best_params = model.params().clone();
            }
        }
        on_epoch(&record);
        report.epochs.push(record);
    }
    *model.params_mut() = best_params;
    Ok(report)
}

/// Full-frame scores of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_pair: Vec<PairScore>,
    /// Mean PSNR in dB; identical frames count as [`PSNR_CAP_DB`].
    pub mean_db: f64,
    /// 5th percentile (linear interpolation between order statistics).
    pub p5_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    pub psnr: Psnr,
}

/// Linear-interpolated percentile `q ∈ [0, 100]` of `values`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Extracts each pair's style from its target, renders the source with it
/// and scores the result against the target.
pub fn evaluate(model: &FlowModel<f32>, pairs: &[ImagePair]) -> Result<EvalSummary, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let rendered = reconstruct(model, pair)?;
        let err = mse(&rendered, &pair.target).map_err(StyleError::from)?;
        per_pair.push(PairScore {
            id: pair.id.clone(),
            psnr: Psnr::from_mse(err, 1.0),
        });
    }
    let db: Vec<f64> = per_pair.iter().map(|p| capped(p.psnr)).collect();
    Ok(EvalSummary {
        mean_db: db.iter().sum::<f64>() / db.len() as f64,
        p5_db: percentile(&db, 5.0),
        per_pair,
    })
}

/// The source of `pair` rendered with the style extracted from the pair.
pub fn reconstruct(model: &FlowModel<f32>, pair: &ImagePair) -> Result<ImageBuffer, TrainError> {
    let style = extract_style(model, &pair.source, &pair.target, &pair.id)?;
    Ok(apply_style(model, &pair.source, &style)?)
}

#[cfg(test)]
mod tests;
