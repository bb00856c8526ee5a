//! Gaussian priors: conditional split priors between scales and the
//! isotropic prior at the coarsest level.

use super::{halves, Conv1, Ctx, FlowError, FlowResult, InLayer, Layout, Linear, WeightInit};
use crate::numerics::{gaussian_logp_per_sample, sample_gaussian, FlowRng, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
enum PriorNet {
    Linear(Linear),
    Conv(Conv1),
}

/// Splits off the first channel half as a latent whose Gaussian mean and
/// log-std are predicted from the retained half.
#[derive(Clone, Debug)]
pub struct SplitPrior {
    net: PriorNet,
    layout: Layout,
    name: String,
}

impl SplitPrior {
    /// `channels` is the extent before splitting. The prediction map starts
    /// at zero, i.e. a standard normal prior.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, layout: Layout, rng: &mut FlowRng) -> FlowResult<Self> {
        if !channels.is_multiple_of(2) {
            return Err(FlowError::OddSplitAxis { axis: layout.axis(), extent: channels });
        }
        let half = channels / 2;
        let net = match layout {
            Layout::Features => PriorNet::Linear(Linear::new(store, name, half, channels, WeightInit::Zero, rng)),
            Layout::Channels => PriorNet::Conv(Conv1::new(store, name, half, channels, WeightInit::Zero, rng)),
        };
        Ok(Self { net, layout, name: name.to_string() })
    }

    fn params_of(&self, ctx: &Ctx, keep: Var) -> FlowResult<(Var, Var)> {
        let out = match &self.net {
            PriorNet::Linear(l) => l.apply(ctx, keep)?,
            PriorNet::Conv(c) => c.apply(ctx, keep)?,
        };
        halves(ctx.tape, out, self.layout.axis())
    }

    /// Returns `(keep, z, logp)`.
    pub fn forward(&self, ctx: &Ctx, h: Var) -> FlowResult<(Var, Var, Var)> {
        let (z, keep) = halves(ctx.tape, h, self.layout.axis())?;
        let (mean, log_std) = self.params_of(ctx, keep)?;
        let logp = gaussian_logp_per_sample(ctx.tape, z, mean, log_std).in_layer(&self.name)?;
        Ok((keep, z, logp))
    }

    /// Joins `keep` with a recorded `z`, or with one drawn per sample at
    /// `temperature`. Returns the merged tensor and the `z` used.
    pub fn inverse(
        &self,
        ctx: &Ctx,
        keep: Var,
        z: Option<&Tensor>,
        temperature: f64,
        rngs: &mut [FlowRng],
    ) -> FlowResult<(Var, Tensor)> {
        let t = ctx.tape;
        let z = match z {
            Some(z) => z.clone(),
            None => {
                let (mean, log_std) = self.params_of(ctx, keep)?;
                sample_per_sample(&t.value(mean), &t.value(log_std), temperature, rngs)?
            }
        };
        let zv = t.constant(z.clone()).in_layer(&self.name)?;
        Ok((t.concat(&[zv, keep], self.layout.axis())?, z))
    }

}

/// Draws each batch entry from its own stream, in row-major order.
pub fn sample_per_sample(mean: &Tensor, log_std: &Tensor, temperature: f64, rngs: &mut [FlowRng]) -> FlowResult<Tensor> {
    let b = mean.shape()[0];
    if rngs.len() != b {
        return Err(FlowError::Latents(format!("{} rng streams for batch {b}", rngs.len())));
    }
    let rows = (0..b)
        .map(|i| sample_gaussian(&mean.index0(i), &log_std.index0(i), temperature, &mut rngs[i]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::stack(&rows)?)
}

/// Per-sample log-density of `z` under `N(0, exp(log_sigma)^2)`.
pub fn top_prior_logp(ctx: &Ctx, z: Var, log_sigma: ParamId) -> FlowResult<Var> {
    let t = ctx.tape;
    let rank = t.shape(z).len();
    let unit = vec![1; rank];
    let ls = t.reshape(ctx.p(log_sigma), &unit)?;
    let zero = t.constant(Tensor::zeros(&unit))?;
    Ok(gaussian_logp_per_sample(t, z, zero, ls)?)
}
