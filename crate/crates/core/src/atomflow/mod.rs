//! Conditional flow over the atom matrix given the bond tensor.
//!
//! Block `i` merges the previous block's retained features into clusters of
//! `k_i` nodes (skipped at the finest block), runs `K` steps of
//! actnorm, LU mixing and graph coupling conditioned on the coarsened bond
//! structure, then splits off the first feature half as the latent `z^i`.
//! The coarsest block emits everything it holds.

mod coarsen;
mod rgcn;

pub use coarsen::{assignment_matrix, coarsen_batch, coarsen_structure, merge_features, unmerge_features};
pub use rgcn::{normalized_relations, GraphCouplingNet, RgcnConv};

use serde::{Deserialize, Serialize};

use crate::flowcore::{
    affine_coupling, sample_per_sample, top_prior_logp, Actnorm, Ctx, Direction, FlowError, FlowResult, InvLu, Layout,
    LuInit, SplitPrior,
};
use crate::numerics::{FlowRng, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomFlowConfig {
    /// Cluster sizes `k_1..k_L`; the flow has `L + 1` blocks.
    pub coarsen: Vec<usize>,
    pub steps: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub mlp_hidden: usize,
}

impl AtomFlowConfig {
    /// `(nodes, features)` entering each block's steps.
    pub fn geometry(&self, n: usize, d: usize) -> FlowResult<Vec<(usize, usize)>> {
        if self.steps == 0 {
            return Err(FlowError::Config("atom flow needs at least one step per block".into()));
        }
        let mut geo = vec![(n, d)];
        for &k in &self.coarsen {
            if !(2..=4).contains(&k) {
                return Err(FlowError::Config(format!("coarsening factor {k} outside 2..=4")));
            }
            let (pn, pd) = *geo.last().expect("non-empty");
            if pn % k != 0 {
                return Err(FlowError::IndivisibleN { n: pn, k });
            }
            geo.push((pn / k, pd / 2 * k));
        }
        for &(_, w) in &geo {
            if w % 2 != 0 {
                return Err(FlowError::Config(format!("atom feature width {w} is odd")));
            }
        }
        Ok(geo)
    }
}

#[derive(Clone, Debug)]
struct AtomStep {
    actnorm: Actnorm,
    lu: InvLu,
    net: GraphCouplingNet,
    condition_on_first: bool,
    name: String,
}

#[derive(Clone, Debug)]
struct AtomBlock {
    steps: Vec<AtomStep>,
    split: Option<SplitPrior>,
}

/// Latents of every level plus the flow's log-det and prior log-density,
/// all per sample.
pub struct FlowOut {
    pub latents: Vec<Var>,
    pub logdet: Var,
    pub logp_prior: Var,
}

#[derive(Clone, Debug)]
pub struct AtomFlow {
    blocks: Vec<AtomBlock>,
    coarsen: Vec<usize>,
    geometry: Vec<(usize, usize)>,
}

impl AtomFlow {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        d: usize,
        bond_channels: usize,
        cfg: &AtomFlowConfig,
        lu_init: LuInit,
        rng: &mut FlowRng,
    ) -> FlowResult<Self> {
        let geometry = cfg.geometry(n, d)?;
        if bond_channels < 2 {
            return Err(FlowError::Config("need a no-bond channel and at least one bond channel".into()));
        }
        let last = geometry.len() - 1;
        let mut blocks = Vec::new();
        for (i, &(_, w)) in geometry.iter().enumerate() {
            let steps = (0..cfg.steps)
                .map(|s| {
                    let sn = format!("{name}.b{i}.s{s}");
                    AtomStep {
                        actnorm: Actnorm::new(store, &format!("{sn}.actnorm"), w, Layout::Features),
                        lu: InvLu::new(store, &format!("{sn}.lu"), w, Layout::Features, lu_init, rng),
                        net: GraphCouplingNet::new(
                            store,
                            &format!("{sn}.coupling"),
                            w / 2,
                            w / 2,
                            bond_channels - 1,
                            cfg.gcn_layers,
                            cfg.gcn_hidden,
                            cfg.mlp_hidden,
                            rng,
                        ),
                        condition_on_first: s % 2 == 0,
                        name: format!("{sn}.coupling"),
                    }
                })
                .collect();
            let split = if i < last {
                Some(SplitPrior::new(store, &format!("{name}.b{i}.prior"), w, Layout::Features, rng)?)
            } else {
                None
            };
            blocks.push(AtomBlock { steps, split });
        }
        Ok(Self { blocks, coarsen: cfg.coarsen.clone(), geometry })
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
            .map(|(i, &(n, w))| if i < last { vec![n, w / 2] } else { vec![n, w] })
            .collect()
    }

    /// Normalized relation matrices of every scale, from a one-hot bond
    /// batch `[B, b, n, n]` whose channel 0 is no-bond.
    fn relations(&self, ctx: &Ctx, a_onehot: &Tensor) -> FlowResult<Vec<Vec<Var>>> {
        let ch = a_onehot.shape()[1];
        let mut a = Tensor::stack(&(0..a_onehot.shape()[0]).map(|b| a_onehot.index0(b).narrow(0, 1, ch - 1)).collect::<Result<Vec<_>, _>>()?)?;
        let mut out = Vec::new();
        for i in 0..self.blocks.len() {
            if i > 0 {
                a = coarsen_batch(&a, self.coarsen[i - 1])?;
            }
            let rel = normalized_relations(&a).into_iter().map(|r| ctx.tape.constant(r)).collect::<Result<Vec<_>, _>>()?;
            out.push(rel);
        }
        Ok(out)
    }

    fn step(&self, ctx: &Ctx, st: &AtomStep, h: Var, rel: &[Var], dir: Direction) -> FlowResult<(Var, Var)> {
        let t = ctx.tape;
        let coupling = |x: Var| affine_coupling(ctx, &st.name, x, 2, st.condition_on_first, dir, |c| st.net.apply(ctx, c, rel));
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

    /// Encodes dequantized atoms `x` (`[B, n, d]`) given one-hot bonds.
    pub fn forward(&self, ctx: &Ctx, x: Var, a_onehot: &Tensor, log_sigma: ParamId) -> FlowResult<FlowOut> {
        let t = ctx.tape;
        let batch = t.shape(x)[0];
        let rels = self.relations(ctx, a_onehot)?;
        let mut h = x;
        let mut logdet = t.constant(Tensor::zeros(&[batch]))?;
        let mut logp = t.constant(Tensor::zeros(&[batch]))?;
        let mut latents = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                h = merge_features(t, h, self.coarsen[i - 1])?;
            }
            for st in &block.steps {
                let (nh, ld) = self.step(ctx, st, h, &rels[i], Direction::Forward)?;
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

    /// Decodes latents into atoms. Levels given as `None` are drawn from
    /// their priors at `temperature`, one rng stream per sample. Returns the
    /// atom tensor and the latents actually used.
    pub fn inverse(
        &self,
        ctx: &Ctx,
        a_onehot: &Tensor,
        latents: &[Option<Tensor>],
        log_sigma: ParamId,
        temperature: f64,
        rngs: &mut [FlowRng],
    ) -> FlowResult<(Var, Vec<Tensor>)> {
        let t = ctx.tape;
        let levels = self.blocks.len();
        if latents.len() != levels {
            return Err(FlowError::Latents(format!("atom flow has {levels} levels, got {}", latents.len())));
        }
        let batch = a_onehot.shape()[0];
        let rels = self.relations(ctx, a_onehot)?;
        let shapes = self.latent_shapes();
        let mut used = vec![Tensor::zeros(&[1]); levels];
        let top = match &latents[levels - 1] {
            Some(z) => z.clone(),
            None => {
                let mut shape = vec![batch];
                shape.extend(&shapes[levels - 1]);
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
                h = self.step(ctx, st, h, &rels[i], Direction::Inverse)?.0;
            }
            if i > 0 {
                h = unmerge_features(t, h, self.coarsen[i - 1])?;
            }
        }
        Ok((h, used))
    }
}
