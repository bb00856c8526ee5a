//! Two-layer swish regressor on flattened latents.

use super::PropertyScorer;
use crate::error::{Error, Result};
use crate::flowcore::{Ctx, Linear, WeightInit};
use crate::generation::encode_latents;
use crate::model::{FlowModel, STREAM_SURROGATE};
use crate::molgraph::{MolError, MolGraph};
use crate::numerics::{FlowRng, ParamStore, Tape, Tensor, Var};
use crate::training::Adam;

pub const HIDDEN: usize = 32;
const BATCH: usize = 256;
const LEARNING_RATE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Surrogate {
    pub(crate) params: ParamStore,
    hidden: Linear,
    pub(crate) out: Linear,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct SurrogateFit {
    pub surrogate: Surrogate,
    /// Mean squared error over the whole set before training and after
    /// each epoch.
    pub mse: Vec<f64>,
}

impl Surrogate {
    /// Random hidden layer, zero output weights and an output bias at
    /// `mean`, so the untrained prediction is the target mean.
    pub fn new(dim: usize, mean: f64, rng: &mut FlowRng) -> Self {
        let mut params = ParamStore::new();
        let hidden = Linear::new(&mut params, "surrogate.hidden", dim, HIDDEN, WeightInit::Random, rng);
        let out = Linear::new(&mut params, "surrogate.out", HIDDEN, 1, WeightInit::Zero, rng);
        params.set(out.b, Tensor::full(&[1, 1], mean));
        params.round_to_f32();
        Self { params, hidden, out, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, ctx: &Ctx, z: Var) -> Result<Var> {
        let h = ctx.tape.swish(self.hidden.apply(ctx, z)?)?;
        Ok(self.out.apply(ctx, h)?)
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Invalid(format!("surrogate expects {} latent values, got {}", self.dim, z.len())));
        }
        Ok(())
    }

    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params);
        let y = self.forward(&ctx, tape.constant(Tensor::new(&[1, self.dim], z.to_vec())?)?)?;
        Ok(tape.value(y).item())
    }

    /// Gradient of the prediction with respect to the latents.
    pub fn grad(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params);
        let zv = tape.leaf(Tensor::new(&[1, self.dim], z.to_vec())?)?;
        let y = tape.sum(self.forward(&ctx, zv)?)?;
        Ok(tape.backward(y)?.wrt(zv).into_data())
    }

    fn mse(&self, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params);
        let y = self.forward(&ctx, tape.constant(inputs.clone())?)?;
        let pred = tape.value(y);
        let n = targets.numel() as f64;
        Ok(pred.data().iter().zip(targets.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n)
    }
}

/// Fits a surrogate of `scorer` on the latents of `graphs`. Each molecule's
/// dequantization noise comes from a fixed stream of `seed`.
pub fn fit_surrogate(
    model: &FlowModel,
    graphs: &[MolGraph],
    scorer: PropertyScorer,
    epochs: usize,
    seed: u64,
    threads: usize,
) -> Result<SurrogateFit> {
    if graphs.is_empty() {
        return Err(MolError::EmptyBatch.into());
    }
    let root = FlowRng::new(seed).split(STREAM_SURROGATE);
    let z = encode_latents(model, graphs, root.split(0), threads)?;
    let dim = z.len_flat();
    let rows: Vec<f64> = (0..graphs.len()).flat_map(|i| z.flat(i)).collect();
    let inputs = Tensor::new(&[graphs.len(), dim], rows)?;
    let targets: Vec<f64> = graphs.iter().map(|g| (scorer.score)(g)).collect();
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let targets = Tensor::new(&[graphs.len(), 1], targets)?;

    let mut rng = root.split(1);
    let mut s = Surrogate::new(dim, mean, &mut rng);
    let mut adam = Adam::new(&s.params, LEARNING_RATE);
    let mut mse = vec![s.mse(&inputs, &targets)?];
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        for chunk in order.chunks(BATCH) {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &s.params);
            let x = tape.index_select(tape.constant(inputs.clone())?, 0, chunk)?;
            let t = tape.index_select(tape.constant(targets.clone())?, 0, chunk)?;
            let diff = tape.sub(s.forward(&ctx, x)?, t)?;
            let loss = tape.mean(tape.mul(diff, diff)?)?;
            let grads = tape.backward(loss)?.all_params(&s.params);
            adam.update(&mut s.params, &grads);
        }
        mse.push(s.mse(&inputs, &targets)?);
    }
    Ok(SurrogateFit { surrogate: s, mse })
}
