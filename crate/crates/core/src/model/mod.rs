//! The two-part generative model: a bond flow over the adjacency tensor and
//! an atom flow conditioned on the decoded bonds.

mod config;

pub use config::Config;

use crate::atomflow::AtomFlow;
use crate::bondflow::BondFlow;
use crate::error::Result;
use crate::flowcore::{Ctx, FlowError, LuInit};
use crate::molgraph::{bfs_order, decode, encode, EncodedGraph, MolGraph};
use crate::numerics::{FlowRng, ParamId, ParamStore, Tensor, Var};

/// Sub-stream ids of the run seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_SAMPLE: u64 = 2;
pub const STREAM_RECON: u64 = 3;
pub const STREAM_RESAMPLE: u64 = 4;
pub const STREAM_SURROGATE: u64 = 5;
pub const STREAM_LSO: u64 = 6;

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: Config,
    pub params: ParamStore,
    pub atom: AtomFlow,
    pub bond: BondFlow,
    pub log_sigma: ParamId,
    pub actnorm_initialized: bool,
}

/// Latents of both flows, each level with a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPack {
    pub bond: Vec<Tensor>,
    pub atom: Vec<Tensor>,
}

impl LatentPack {
    pub fn batch(&self) -> usize {
        self.bond[0].shape()[0]
    }

    /// Sample `i` as a batch of one.
    pub fn select(&self, i: usize) -> LatentPack {
        let one = |z: &Tensor| {
            let mut shape = z.shape().to_vec();
            shape[0] = 1;
            z.index0(i).reshape(&shape).expect("same size")
        };
        LatentPack { bond: self.bond.iter().map(one).collect(), atom: self.atom.iter().map(one).collect() }
    }

    pub fn concat(parts: &[LatentPack]) -> Result<LatentPack> {
        let join = |level: usize, pick: fn(&LatentPack) -> &Vec<Tensor>| -> Result<Tensor> {
            let refs: Vec<&Tensor> = parts.iter().map(|p| &pick(p)[level]).collect();
            Ok(Tensor::concat(&refs, 0)?)
        };
        let first = parts.first().ok_or_else(|| FlowError::Latents("no latents to join".into()))?;
        Ok(LatentPack {
            bond: (0..first.bond.len()).map(|l| join(l, |p| &p.bond)).collect::<Result<_>>()?,
            atom: (0..first.atom.len()).map(|l| join(l, |p| &p.atom)).collect::<Result<_>>()?,
        })
    }

    /// Every level of sample `i` flattened, bonds first.
    pub fn flat(&self, i: usize) -> Vec<f64> {
        self.bond.iter().chain(&self.atom).flat_map(|z| z.index0(i).into_data()).collect()
    }

    /// Inverse of [`LatentPack::flat`] for a batch of one, shaped like `self`.
    pub fn from_flat_like(&self, data: &[f64]) -> Result<LatentPack> {
        let mut off = 0;
        let mut take = |z: &Tensor| -> Result<Tensor> {
            let mut shape = z.shape().to_vec();
            shape[0] = 1;
            let len: usize = shape.iter().product();
            let slice = data.get(off..off + len).ok_or_else(|| FlowError::Latents("flat latent too short".into()))?;
            off += len;
            Ok(Tensor::new(&shape, slice.to_vec())?)
        };
        let bond = self.bond.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
        let atom = self.atom.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
        if off != data.len() {
            return Err(FlowError::Latents(format!("flat latent has {} values, expected {off}", data.len())).into());
        }
        Ok(LatentPack { bond, atom })
    }

    pub fn len_flat(&self) -> usize {
        self.bond.iter().chain(&self.atom).map(|z| z.numel() / z.shape()[0]).sum()
    }
}

/// Output of [`FlowModel::decode`]: real atom features, one-hot bonds and
/// the latents that produced them.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub x: Tensor,
    pub a_hat: Tensor,
    pub latents: LatentPack,
}

impl Decoded {
    pub fn graph(&self, i: usize, model: &FlowModel) -> MolGraph {
        decode(&self.x.index0(i), &self.a_hat.index0(i), &model.config.elements)
    }
}

/// Symmetrizes each bond channel of `a` (`[B, b, n, n]`), takes the channel
/// argmax off the diagonal (lowest channel on ties) and returns the one-hot
/// tensor. Diagonal entries are no-bond.
pub fn onehot_bonds(a: &Tensor) -> Tensor {
    let (batch, ch, n) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = Tensor::zeros(a.shape());
    for b in 0..batch {
        for i in 0..n {
            for j in 0..n {
                let mut best = 0;
                if i != j {
                    let mut best_v = f64::NEG_INFINITY;
                    for c in 0..ch {
                        let v = 0.5 * (a.at(&[b, c, i, j]) + a.at(&[b, c, j, i]));
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                }
                out.set(&[b, best, i, j], 1.0);
            }
        }
    }
    out
}

impl FlowModel {
    pub fn new(config: Config) -> Result<Self> {
        Self::with_lu_init(config, LuInit::RandomOrthogonal)
    }

    pub fn with_lu_init(config: Config, lu_init: LuInit) -> Result<Self> {
        config.validate()?;
        let mut rng = FlowRng::new(config.seed).split(STREAM_INIT);
        let mut params = ParamStore::new();
        let bond = BondFlow::new(&mut params, "bond", config.bond_channels, config.n, &config.bond, lu_init, &mut rng)?;
        let atom = AtomFlow::new(
            &mut params,
            "atom",
            config.n,
            config.d_pad,
            config.bond_channels,
            &config.atom,
            lu_init,
            &mut rng,
        )?;
        let log_sigma = params.add("log_sigma", Tensor::scalar(0.0));
        params.round_to_f32();
        Ok(Self { config, params, atom, bond, log_sigma, actnorm_initialized: false })
    }

    /// BFS-orders `g` and encodes it at the model's padding.
    pub fn encode_graph(&self, g: &MolGraph) -> Result<EncodedGraph> {
        let c = &self.config;
        Ok(encode(&g.permuted(&bfs_order(g)), c.n, c.d_pad, &c.elements)?)
    }

    /// Per-sample `log p(A) + log p(X | A)` of dequantized `(x, a)` with the
    /// one-hot bonds `a_onehot` as the atom flow's condition.
    pub fn log_prob(&self, ctx: &Ctx, x: Var, a: Var, a_onehot: &Tensor) -> Result<Var> {
        let t = ctx.tape;
        let bo = self.bond.forward(ctx, a, self.log_sigma)?;
        let ao = self.atom.forward(ctx, x, a_onehot, self.log_sigma)?;
        let lb = t.add(bo.logdet, bo.logp_prior)?;
        let la = t.add(ao.logdet, ao.logp_prior)?;
        Ok(t.add(lb, la)?)
    }

    /// Forward pass returning the latents of both flows.
    pub fn encode(&self, ctx: &Ctx, x: Var, a: Var, a_onehot: &Tensor) -> Result<LatentPack> {
        let t = ctx.tape;
        let bo = self.bond.forward(ctx, a, self.log_sigma)?;
        let ao = self.atom.forward(ctx, x, a_onehot, self.log_sigma)?;
        let val = |v: &Var| t.value(*v).as_ref().clone();
        Ok(LatentPack { bond: bo.latents.iter().map(val).collect(), atom: ao.latents.iter().map(val).collect() })
    }

    /// Two-step decoding: bond latents to a real bond tensor, argmax to
    /// one-hot bonds, then atom latents conditioned on those bonds. Missing
    /// levels are drawn at `temperature` from each sample's own stream,
    /// bonds before atoms.
    pub fn decode(
        &self,
        ctx: &Ctx,
        batch: usize,
        bond: &[Option<Tensor>],
        atom: &[Option<Tensor>],
        temperature: f64,
        rngs: &mut [FlowRng],
    ) -> Result<Decoded> {
        let (a, bond_used) = self.bond.inverse(ctx, batch, bond, self.log_sigma, temperature, rngs)?;
        let a_hat = onehot_bonds(&ctx.tape.value(a));
        let (x, atom_used) = self.atom.inverse(ctx, &a_hat, atom, self.log_sigma, temperature, rngs)?;
        Ok(Decoded {
            x: ctx.tape.value(x).as_ref().clone(),
            a_hat,
            latents: LatentPack { bond: bond_used, atom: atom_used },
        })
    }

    /// Decodes fully specified latents.
    pub fn decode_latents(&self, ctx: &Ctx, z: &LatentPack) -> Result<Decoded> {
        let bond: Vec<_> = z.bond.iter().cloned().map(Some).collect();
        let atom: Vec<_> = z.atom.iter().cloned().map(Some).collect();
        let mut rngs: Vec<FlowRng> = (0..z.batch()).map(|i| FlowRng::new(0).split(i as u64)).collect();
        self.decode(ctx, z.batch(), &bond, &atom, 1.0, &mut rngs)
    }

    pub fn bond_levels(&self) -> usize {
        self.bond.latent_shapes().len()
    }

    pub fn atom_levels(&self) -> usize {
        self.atom.latent_shapes().len()
    }
}

/// Stacks encoded graphs into `([B, n, d], [B, b, n, n])`.
pub fn stack_encoded(items: &[&EncodedGraph]) -> Result<(Tensor, Tensor)> {
    let xs: Vec<Tensor> = items.iter().map(|e| e.x.clone()).collect();
    let as_: Vec<Tensor> = items.iter().map(|e| e.a.clone()).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&as_)?))
}
