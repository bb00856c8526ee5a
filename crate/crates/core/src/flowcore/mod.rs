//! Invertible layers with exact log-determinants.
//!
//! Every layer maps a batch-first tensor and returns a per-sample log-det of
//! shape `[B]`. Inverse passes run on a tape too, but are never
//! differentiated.

mod actnorm;
mod coupling;
mod lu;
mod nn;
mod prior;
mod squeeze;

pub use actnorm::Actnorm;
pub use coupling::{affine_coupling, rescale, rescale_r};
pub use lu::{InvLu, LuInit};
pub use nn::{Conv1, Conv3, Linear, WeightInit};
pub use prior::{sample_per_sample, top_prior_logp, SplitPrior};
pub use squeeze::{squeeze, unsqueeze};

use std::cell::RefCell;

use thiserror::Error;

use crate::numerics::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("{layer}: scale {min} below 1e-7")]
    ZeroScale { layer: String, min: f64 },
    #[error("{layer}: channel {channel} has std {std} in the init batch")]
    ZeroStd { layer: String, channel: usize, std: f64 },
    #[error("spatial extent {0} is odd")]
    OddSpatialDim(usize),
    #[error("axis {axis} has odd extent {extent}")]
    OddSplitAxis { axis: usize, extent: usize },
    #[error("{n} nodes are not divisible by {k}")]
    IndivisibleN { n: usize, k: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("latents: {0}")]
    Latents(String),
}

pub type FlowResult<T> = Result<T, FlowError>;

/// Attaches a layer name to tensor errors.
pub trait InLayer<T> {
    fn in_layer(self, layer: &str) -> FlowResult<T>;
}

impl<T> InLayer<T> for Result<T, TensorError> {
    fn in_layer(self, layer: &str) -> FlowResult<T> {
        self.map_err(|source| FlowError::Layer { layer: layer.to_string(), source })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Where a layer's channels live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `[B, n, d]` node-feature matrices; channels on the last axis.
    Features,
    /// `[B, C, H, W]` images; channels on axis 1.
    Channels,
}

impl Layout {
    pub fn axis(self) -> usize {
        match self {
            Layout::Features => 2,
            Layout::Channels => 1,
        }
    }

    /// Shape of a per-channel parameter that broadcasts against the input.
    pub fn param_shape(self, c: usize) -> Vec<usize> {
        match self {
            Layout::Features => vec![1, 1, c],
            Layout::Channels => vec![1, c, 1, 1],
        }
    }
}

/// One evaluation of a model: the tape, read-only parameters, and, during
/// data-dependent initialization, the values layers want written back.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamStore,
    init: Option<RefCell<Vec<(ParamId, Tensor)>>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, params: &'a ParamStore) -> Self {
        Self { tape, params, init: None }
    }

    /// A context whose actnorm layers initialize from the data they see.
    pub fn initializing(tape: &'a Tape, params: &'a ParamStore) -> Self {
        Self { tape, params, init: Some(RefCell::new(Vec::new())) }
    }

    pub fn is_initializing(&self) -> bool {
        self.init.is_some()
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub(crate) fn record_init(&self, id: ParamId, value: Tensor) {
        if let Some(updates) = &self.init {
            updates.borrow_mut().push((id, value));
        }
    }

    /// Parameter values computed during an initializing pass.
    pub fn into_updates(self) -> Vec<(ParamId, Tensor)> {
        self.init.map(RefCell::into_inner).unwrap_or_default()
    }
}

/// Zero per-sample log-det for a batch.
pub fn zero_logdet(ctx: &Ctx, batch: usize) -> FlowResult<Var> {
    Ok(ctx.tape.constant(Tensor::zeros(&[batch]))?)
}

/// Splits `x` into equal halves along `axis`.
pub fn halves(tape: &Tape, x: Var, axis: usize) -> FlowResult<(Var, Var)> {
    let extent = tape.shape(x)[axis];
    if !extent.is_multiple_of(2) {
        return Err(FlowError::OddSplitAxis { axis, extent });
    }
    let parts = tape.split(x, axis, &[extent / 2, extent / 2])?;
    Ok((parts[0], parts[1]))
}
