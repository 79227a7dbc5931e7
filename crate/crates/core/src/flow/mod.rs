//! The conditional invertible network.
//!
//! A stack of invertible blocks, each an affine coupling conditioned on the
//! polynomial basis of the source pixel, a fixed channel permutation and an
//! ActNorm layer. Running the stack from pixel to latent is the
//! discriminative ("inverse") pass; running it backwards from latent to
//! pixel is the generative ("forward") pass.
//!
//! Three latent layouts are supported: plain 3-D, a 2-D variant that splits
//! one channel off halfway through the stack, and a 4-D variant that appends
//! an augmentation channel to the input.

mod eval;
mod graph;
pub(crate) mod kernel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, Tensor2D, TensorError};
use crate::pcc::{basis_len, PccError, MAX_DEGREE};
use crate::Real;

pub use eval::{BatchLatents, Conditioning, CHUNK};
pub use graph::{record_params, GraphLatents, ParamVars};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("ActNorm layers have not been initialized")]
    ActNormUninitialized,
    #[error("conditioning length {got}, expected {expected}")]
    ConditioningLength { expected: usize, got: usize },
    #[error("conditioning degree {got}, model uses {expected}")]
    ConditioningDegree { expected: u8, got: u8 },
    #[error("vector has {got} values, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{0} pixels given, conditioning covers {1}")]
    PixelCount(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("block index {0} out of range")]
    Block(usize),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pcc(#[from] PccError),
}

/// Latent layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One channel leaves the stack halfway; the style latent is 2-D.
    Dim2Split,
    Dim3,
    /// The pixel is augmented with a fourth channel before the first block.
    Dim4Augmented,
}

impl Variant {
    /// Dimension of the style latent.
    pub fn latent_dim(self) -> usize {
        match self {
            Variant::Dim2Split => 2,
            Variant::Dim3 => 3,
            Variant::Dim4Augmented => 4,
        }
    }

    /// Channels entering the first block.
    pub fn input_width(self) -> usize {
        match self {
            Variant::Dim4Augmented => 4,
            _ => 3,
        }
    }

    pub fn from_dim(dim: usize) -> Option<Self> {
        match dim {
            2 => Some(Variant::Dim2Split),
            3 => Some(Variant::Dim3),
            4 => Some(Variant::Dim4Augmented),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub variant: Variant,
    /// PCC degree of the conditioning vector.
    pub degree: u8,
    pub hidden_width: usize,
    pub blocks: usize,
    /// Soft clamp bound on the coupling log-scales.
    pub s_max: f64,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dim3,
            degree: 4,
            hidden_width: 28,
            blocks: 8,
            s_max: 2.0,
            leaky_slope: 0.01,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn new(variant: Variant, degree: u8, hidden_width: usize, seed: u64) -> Self {
        Self {
            variant,
            degree,
            hidden_width,
            seed,
            ..Self::default()
        }
    }

    /// Blocks run before the split in the 2-D variant.
    pub fn split_after(&self) -> Option<usize> {
        (self.variant == Variant::Dim2Split).then_some(self.blocks / 2)
    }

    pub fn conditioning_len(&self) -> usize {
        basis_len(self.degree).unwrap_or(0)
    }

    fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: String| Err(FlowError::Config(m));
        if !(1..=MAX_DEGREE).contains(&self.degree) {
            return bad(format!("degree {} outside 1..={MAX_DEGREE}", self.degree));
        }
        if self.hidden_width < 4 {
            return bad(format!("hidden width {} below 4", self.hidden_width));
        }
        if self.blocks == 0 || (self.variant == Variant::Dim2Split && self.blocks < 2) {
            return bad(format!("{} blocks is too few for {:?}", self.blocks, self.variant));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return bad(format!("s_max must be positive, got {}", self.s_max));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }
}

/// Parameter handles of one coupling subnetwork.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

/// Shape and parameters of one invertible block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub width: usize,
    /// `(len(u1), len(u2))`.
    pub split: (usize, usize),
    /// Output channel `j` of the permutation is input channel `perm[j]`.
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
    pub s_net: MlpIds,
    pub t_net: MlpIds,
    pub logs: ParamId,
    pub bias: ParamId,
}

/// Per-pixel result of the discriminative pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentResult<T = f32> {
    /// Style latent; 2, 3 or 4 values.
    pub z: Vec<T>,
    /// The channel split off halfway in the 2-D variant.
    pub split: Option<T>,
    pub log_det: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T = f32> {
    config: FlowConfig,
    blocks: Vec<Block>,
    params: ParamStore<T>,
    actnorm_ready: bool,
}

pub(crate) fn split_sizes(width: usize) -> (usize, usize) {
    match width {
        2 => (1, 1),
        3 => (1, 2),
        _ => (width / 2, width - width / 2),
    }
}

/// A permutation whose first `n1` outputs all come from the transformed half,
/// so the untouched channels of one block are transformed by the next.
fn mixing_permutation(width: usize, n1: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    loop {
        let mut perm: Vec<usize> = (0..width).collect();
        perm.shuffle(rng);
        if perm[..n1].iter().all(|&p| p >= n1) {
            return perm;
        }
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

fn block_widths(config: &FlowConfig) -> Vec<usize> {
    let w0 = config.variant.input_width();
    (0..config.blocks)
        .map(|b| match config.split_after() {
            Some(s) if b >= s => w0 - 1,
            _ => w0,
        })
        .collect()
}

/// Builds an untrained model: hidden layers Glorot-uniform, output layers
/// zero (every coupling starts as the identity), unit ActNorm.
pub fn build_model(config: FlowConfig) -> Result<FlowModel<f32>, FlowError> {
    config.validate()?;
    let mut weight_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut perm_rng = ChaCha8Rng::seed_from_u64(config.seed);
    perm_rng.set_stream(1);
    let cond = config.conditioning_len();
    let h = config.hidden_width;
    let mut params = ParamStore::new();
    let mut blocks = Vec::with_capacity(config.blocks);
    for (b, &width) in block_widths(&config).iter().enumerate() {
        let (n1, n2) = split_sizes(width);
        let mut mlp = |net: &str, params: &mut ParamStore<f32>| {
            let mut glorot = |name: &str, fan_in: usize, fan_out: usize| {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let data = (0..fan_in * fan_out).map(|_| weight_rng.random_range(-a..a)).collect();
                let t = Tensor2D::from_vec(fan_in, fan_out, data).expect("shape");
                params.add(format!("block{b}.{net}.{name}"), t)
            };
            let w1 = glorot("w1", n1 + cond, h);
            let w2 = glorot("w2", h, h);
            let name = |n: &str| format!("block{b}.{net}.{n}");
            let b1 = params.add(name("b1"), Tensor2D::zeros(1, h));
            let b2 = params.add(name("b2"), Tensor2D::zeros(1, h));
            let w3 = params.add(name("w3"), Tensor2D::zeros(h, n2));
            let b3 = params.add(name("b3"), Tensor2D::zeros(1, n2));
            MlpIds { w1, b1, w2, b2, w3, b3 }
        };
        let s_net = mlp("s", &mut params);
        let t_net = mlp("t", &mut params);
        let logs = params.add(format!("block{b}.actnorm.logs"), Tensor2D::zeros(1, width));
        let bias = params.add(format!("block{b}.actnorm.bias"), Tensor2D::zeros(1, width));
        let perm = mixing_permutation(width, n1, &mut perm_rng);
        blocks.push(Block {
            width,
            split: (n1, n2),
            inv_perm: invert_perm(&perm),
            perm,
            s_net,
            t_net,
            logs,
            bias,
        });
    }
    Ok(FlowModel {
        config,
        blocks,
        params,
        actnorm_ready: false,
    })
}

impl<T: Real> FlowModel<T> {
    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn latent_dim(&self) -> usize {
        self.config.variant.latent_dim()
    }

    pub fn degree(&self) -> u8 {
        self.config.degree
    }

    pub fn conditioning_len(&self) -> usize {
        self.config.conditioning_len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn permutations(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().map(|b| b.perm.clone()).collect()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable access for optimizers. Shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn actnorm_ready(&self) -> bool {
        self.actnorm_ready
    }

    /// Declares the current ActNorm values final without data-dependent
    /// initialization (unit ActNorm on a fresh model).
    pub fn mark_actnorm_ready(&mut self) {
        self.actnorm_ready = true;
    }

    pub(crate) fn require_ready(&self) -> Result<(), FlowError> {
        if self.actnorm_ready {
            Ok(())
        } else {
            Err(FlowError::ActNormUninitialized)
        }
    }

    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        FlowModel {
            config: self.config.clone(),
            blocks: self.blocks.clone(),
            params: self.params.cast(),
            actnorm_ready: self.actnorm_ready,
        }
    }

    /// Reassembles a model from stored permutations and parameter values in
    /// declaration order.
    pub fn from_parts(
        config: FlowConfig,
        permutations: &[Vec<usize>],
        values: Vec<Tensor2D<T>>,
        actnorm_ready: bool,
    ) -> Result<Self, FlowError> {
        let skeleton = build_model(config)?;
        if permutations.len() != skeleton.blocks.len() {
            return Err(FlowError::Layout(format!(
                "{} permutations for {} blocks",
                permutations.len(),
                skeleton.blocks.len()
            )));
        }
        let mut blocks = skeleton.blocks;
        for (b, (block, perm)) in blocks.iter_mut().zip(permutations).enumerate() {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..block.width).collect::<Vec<_>>() {
                return Err(FlowError::Layout(format!("block {b}: {perm:?} is not a permutation of {}", block.width)));
            }
            block.inv_perm = invert_perm(perm);
            block.perm = perm.clone();
        }
        if values.len() != skeleton.params.len() {
            return Err(FlowError::Layout(format!(
                "{} tensors for {} parameters",
                values.len(),
                skeleton.params.len()
            )));
        }
        let mut params = ParamStore::new();
        for ((name, expected), value) in skeleton.params.iter().zip(values) {
            if expected.shape() != value.shape() {
                return Err(FlowError::Layout(format!(
                    "{name}: shape {:?}, expected {:?}",
                    value.shape(),
                    expected.shape()
                )));
            }
            if !value.is_finite() {
                return Err(FlowError::NonFinite("parameters"));
            }
            params.add(name, value);
        }
        Ok(Self {
            config: skeleton.config,
            blocks,
            params,
            actnorm_ready,
        })
    }

    /// Adds `N(0, std²)` noise to every parameter, ActNorm included. Used to
    /// exercise the network away from its identity initialization.
    pub fn jitter_params(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            for v in self.params.get_mut(id).data_mut() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = *v + T::lit(std * noise);
            }
        }
    }

    pub(crate) fn block(&self, index: usize) -> Result<&Block, FlowError> {
        self.blocks.get(index).ok_or(FlowError::Block(index))
    }
}
