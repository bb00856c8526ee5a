//! Multi-scale Glow over the bond tensor viewed as a `b`-channel image.
//!
//! Each block squeezes, runs steps of actnorm, 1x1 LU mixing and affine
//! coupling with a criss-cross-attention network, then splits off the first
//! channel half as a latent (except in the last block).

mod cca;

pub use cca::{Cca, CcaCouplingNet};

use serde::{Deserialize, Serialize};

use crate::atomflow::FlowOut;
use crate::flowcore::{
    affine_coupling, sample_per_sample, squeeze, top_prior_logp, unsqueeze, Actnorm, Ctx, Direction, FlowError,
    FlowResult, InvLu, Layout, LuInit, SplitPrior,
};
use crate::numerics::{FlowRng, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondFlowConfig {
    pub blocks: usize,
    pub steps: usize,
    pub hidden: usize,
}

impl BondFlowConfig {
    /// `(channels, spatial)` inside each block, after squeezing.
    pub fn geometry(&self, b: usize, n: usize) -> FlowResult<Vec<(usize, usize)>> {
        if self.blocks == 0 || self.steps == 0 {
            return Err(FlowError::Config("bond flow needs at least one block and one step".into()));
        }
        let mut geo = Vec::new();
        let (mut c, mut s) = (b, n);
        for i in 0..self.blocks {
            if s % 2 != 0 {
                return Err(FlowError::OddSpatialDim(s));
            }
            c *= 4;
            s /= 2;
            geo.push((c, s));
            if i + 1 < self.blocks {
                c /= 2;
            }
        }
        Ok(geo)
    }
}

#[derive(Clone, Debug)]
struct BondStep {
    actnorm: Actnorm,
    lu: InvLu,
    net: CcaCouplingNet,
    condition_on_first: bool,
    name: String,
}

#[derive(Clone, Debug)]
struct BondBlock {
    steps: Vec<BondStep>,
    split: Option<SplitPrior>,
}

#[derive(Clone, Debug)]
pub struct BondFlow {
    blocks: Vec<BondBlock>,
    geometry: Vec<(usize, usize)>,
}

impl BondFlow {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        b: usize,
        n: usize,
        cfg: &BondFlowConfig,
        lu_init: LuInit,
        rng: &mut FlowRng,
    ) -> FlowResult<Self> {
        let geometry = cfg.geometry(b, n)?;
        let mut blocks = Vec::new();
        for (i, &(c, _)) in geometry.iter().enumerate() {
            let steps = (0..cfg.steps)
                .map(|s| {
                    let sn = format!("{name}.b{i}.s{s}");
                    BondStep {
                        actnorm: Actnorm::new(store, &format!("{sn}.actnorm"), c, Layout::Channels),
                        lu: InvLu::new(store, &format!("{sn}.lu"), c, Layout::Channels, lu_init, rng),
                        net: CcaCouplingNet::new(store, &format!("{sn}.coupling"), c / 2, c / 2, cfg.hidden, rng),
                        condition_on_first: s % 2 == 0,
                        name: format!("{sn}.coupling"),
                    }
                })
                .collect();
            let split = if i + 1 < geometry.len() {
                Some(SplitPrior::new(store, &format!("{name}.b{i}.prior"), c, Layout::Channels, rng)?)
            } else {
                None
            };
            blocks.push(BondBlock { steps, split });
        }
        Ok(Self { blocks, geometry })
    }

    pub fn geometry(&self) -> &[(usize, usize)] {
        &self.geometry
    }

    /// Latent shapes per level, without the batch axis.
    pub fn latent_shapes(&self) -> Vec<Vec<usize>> {
        let last = self.geometry.len() - 1;
        self.geometry
            .iter()
            .enumerate()
            .map(|(i, &(c, s))| if i < last { vec![c / 2, s, s] } else { vec![c, s, s] })
            .collect()
    }

    fn step(&self, ctx: &Ctx, st: &BondStep, h: Var, dir: Direction) -> FlowResult<(Var, Var)> {
        let t = ctx.tape;
        let coupling = |x: Var| affine_coupling(ctx, &st.name, x, 1, st.condition_on_first, dir, |c| st.net.apply(ctx, c));
        match dir {
            Direction::Forward => {
                let (h, l1) = st.actnorm.apply(ctx, h, dir)?;
                let (h, l2) = st.lu.apply(ctx, h, dir)?;
                let (h, l3) = coupling(h)?;
                Ok((h, t.add(t.add(l1, l2)?, l3)?))
            }
            Direction::Inverse => {
                let (h, l3) = coupling(h)?;
                let (h, l2) = st.lu.apply(ctx, h, dir)?;
                let (h, l1) = st.actnorm.apply(ctx, h, dir)?;
                Ok((h, t.add(t.add(l1, l2)?, l3)?))
            }
        }
    }

    /// Encodes a dequantized bond tensor `[B, b, n, n]`.
    pub fn forward(&self, ctx: &Ctx, a: Var, log_sigma: ParamId) -> FlowResult<FlowOut> {
        let t = ctx.tape;
        let batch = t.shape(a)[0];
        let mut h = a;
        let mut logdet = t.constant(Tensor::zeros(&[batch]))?;
        let mut logp = t.constant(Tensor::zeros(&[batch]))?;
        let mut latents = Vec::new();
        for block in &self.blocks {
            h = squeeze(t, h)?;
            for st in &block.steps {
                let (nh, ld) = self.step(ctx, st, h, Direction::Forward)?;
                h = nh;
                logdet = t.add(logdet, ld)?;
            }
            match &block.split {
                Some(sp) => {
                    let (keep, z, lp) = sp.forward(ctx, h)?;
                    latents.push(z);
                    logp = t.add(logp, lp)?;
                    h = keep;
                }
                None => {
                    latents.push(h);
                    logp = t.add(logp, top_prior_logp(ctx, h, log_sigma)?)?;
                }
            }
        }
        Ok(FlowOut { latents, logdet, logp_prior: logp })
    }

    /// Decodes latents into a real bond tensor. `None` levels are drawn
    /// from their priors at `temperature`, one rng stream per sample.
    pub fn inverse(
        &self,
        ctx: &Ctx,
        batch: usize,
        latents: &[Option<Tensor>],
        log_sigma: ParamId,
        temperature: f64,
        rngs: &mut [FlowRng],
    ) -> FlowResult<(Var, Vec<Tensor>)> {
        let t = ctx.tape;
        let levels = self.blocks.len();
        if latents.len() != levels {
            return Err(FlowError::Latents(format!("bond flow has {levels} levels, got {}", latents.len())));
        }
        let mut used = vec![Tensor::zeros(&[1]); levels];
        let top = match &latents[levels - 1] {
            Some(z) => z.clone(),
            None => {
                let mut shape = vec![batch];
                shape.extend(&self.latent_shapes()[levels - 1]);
                let ls = ctx.params.get(log_sigma).item();
                sample_per_sample(&Tensor::zeros(&shape), &Tensor::full(&shape, ls), temperature, rngs)?
            }
        };
        used[levels - 1] = top.clone();
        let mut h = t.constant(top)?;
        for i in (0..levels).rev() {
            let block = &self.blocks[i];
            if let Some(sp) = &block.split {
                let (nh, z) = sp.inverse(ctx, h, latents[i].as_ref(), temperature, rngs)?;
                used[i] = z;
                h = nh;
            }
            for st in block.steps.iter().rev() {
                h = self.step(ctx, st, h, Direction::Inverse)?.0;
            }
            h = unsqueeze(t, h)?;
        }
        Ok((h, used))
    }
}
