//! Invertibility and log-determinant checks for every invertible layer and
//! both full flows on tiny, randomly perturbed instances.

use crate::atomflow::{merge_features, normalized_relations, unmerge_features, AtomFlow, AtomFlowConfig, GraphCouplingNet};
use crate::bondflow::{BondFlow, BondFlowConfig, CcaCouplingNet};
use crate::error::{Error, Result};
use crate::flowcore::{affine_coupling, squeeze, unsqueeze, Actnorm, Ctx, Direction, InvLu, Layout, LuInit};
use crate::model::{Config, FlowModel};
use crate::molgraph::ElementTable;
use crate::numerics::{fd_gradient, fd_jacobian_logdet, FlowRng, ParamStore, Tape, Tensor, Var};
use crate::training::nll;

pub const ROUNDTRIP_TOL: f64 = 1e-4;
pub const LOGDET_TOL: f64 = 1e-3;
pub const GRADIENT_TOL: f64 = 1e-3;

pub const LAYERS: [&str; 10] = [
    "actnorm",
    "actnorm2d",
    "lu_features",
    "lu_channels",
    "graph_coupling",
    "cca_coupling",
    "squeeze",
    "merge",
    "atom_flow",
    "bond_flow",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ConformanceRow {
    pub layer: String,
    /// Max-norm of `inverse(forward(x)) - x`.
    pub roundtrip: f64,
    pub logdet: f64,
    pub logdet_fd: f64,
    /// `|logdet - logdet_fd| / max(|logdet|, |logdet_fd|, 1)`.
    pub logdet_rel: f64,
    pub pass: bool,
}

fn perturb(store: &mut ParamStore, rng: &mut FlowRng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.is_trainable(id) {
            let v = store.get(id).map(|x| x + 0.2 * rng.normal());
            store.set(id, v);
        }
    }
}

fn flat(tape: &Tape, vars: &[Var]) -> Tensor {
    let data: Vec<f64> = vars.iter().flat_map(|v| tape.value(*v).data().to_vec()).collect();
    Tensor::new(&[data.len()], data).expect("flat")
}

/// Random symmetric one-hot bonds `[1, b, n, n]` with a no-bond diagonal.
fn random_bonds(b: usize, n: usize, rng: &mut FlowRng) -> Tensor {
    let mut a = Tensor::zeros(&[1, b, n, n]);
    for i in 0..n {
        a.set(&[0, 0, i, i], 1.0);
        for j in i + 1..n {
            let c = if rng.uniform() < 0.5 { 0 } else { rng.below(b) };
            a.set(&[0, c, i, j], 1.0);
            a.set(&[0, c, j, i], 1.0);
        }
    }
    a
}

/// `fwd` maps an input to `(flat output, logdet)`; `inv` maps the flat
/// output back.
fn measure(
    layer: &str,
    x: &Tensor,
    fwd: impl Fn(&Tensor) -> Result<(Tensor, f64)>,
    inv: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<ConformanceRow> {
    let (y, logdet) = fwd(x)?;
    let back = inv(&y)?;
    let roundtrip = back.reshape(x.shape())?.max_abs_diff(x);
    let logdet_fd = fd_jacobian_logdet(|p| fwd(p).map(|r| r.0).unwrap_or_else(|_| Tensor::zeros(&[0])), x, 1e-5)?;
    let logdet_rel = (logdet - logdet_fd).abs() / logdet.abs().max(logdet_fd.abs()).max(1.0);
    Ok(ConformanceRow {
        layer: layer.to_string(),
        roundtrip,
        logdet,
        logdet_fd,
        logdet_rel,
        pass: roundtrip <= ROUNDTRIP_TOL && logdet_rel <= LOGDET_TOL,
    })
}

/// A layer given as `(store, apply)` where `apply(ctx, x, dir)` returns the
/// output and per-sample log-det.
fn single<F>(layer: &str, store: &ParamStore, x: &Tensor, apply: F) -> Result<ConformanceRow>
where
    F: Fn(&Ctx, Var, Direction) -> Result<(Var, Var)>,
{
    let shape = x.shape().to_vec();
    let out_shape = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let (y, _) = apply(&ctx, tape.constant(x.clone())?, Direction::Forward)?;
        tape.shape(y)
    };
    measure(
        layer,
        x,
        |p| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, store);
            let (y, ld) = apply(&ctx, tape.constant(p.reshape_clone(&shape)?)?, Direction::Forward)?;
            Ok((flat(&tape, &[y]), tape.value(ld).item()))
        },
        |y| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, store);
            let (x, _) = apply(&ctx, tape.constant(y.reshape_clone(&out_shape)?)?, Direction::Inverse)?;
            Ok(tape.value(x).as_ref().clone())
        },
    )
}

trait ReshapeClone {
    fn reshape_clone(&self, shape: &[usize]) -> Result<Tensor>;
}

impl ReshapeClone for Tensor {
    fn reshape_clone(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(self.clone().reshape(shape)?)
    }
}

/// Runs the check for one named layer.
pub fn check_layer(layer: &str, seed: u64) -> Result<ConformanceRow> {
    let mut rng = FlowRng::new(seed);
    let mut store = ParamStore::new();
    match layer {
        "actnorm" | "actnorm2d" => {
            let (layout, shape) = if layer == "actnorm" { (Layout::Features, vec![1, 4, 6]) } else { (Layout::Channels, vec![1, 3, 4, 4]) };
            let c = shape[layout.axis()];
            let an = Actnorm::new(&mut store, "an", c, layout);
            perturb(&mut store, &mut rng);
            let x = Tensor::from_fn(&shape, |_| rng.normal());
            single(layer, &store, &x, |ctx, x, dir| Ok(an.apply(ctx, x, dir)?))
        }
        "lu_features" | "lu_channels" => {
            let (layout, shape) =
                if layer == "lu_features" { (Layout::Features, vec![1, 3, 6]) } else { (Layout::Channels, vec![1, 4, 3, 3]) };
            let c = shape[layout.axis()];
            let lu = InvLu::new(&mut store, "lu", c, layout, LuInit::RandomOrthogonal, &mut rng);
            perturb(&mut store, &mut rng);
            let x = Tensor::from_fn(&shape, |_| rng.normal());
            single(layer, &store, &x, |ctx, x, dir| Ok(lu.apply(ctx, x, dir)?))
        }
        "graph_coupling" => {
            let (n, d) = (5, 4);
            let net = GraphCouplingNet::new(&mut store, "gc", d / 2, d / 2, 3, 2, 6, 6, &mut rng);
            perturb(&mut store, &mut rng);
            let bonds = random_bonds(4, n, &mut rng);
            let rel_t = normalized_relations(&bonds.narrow(1, 1, 3)?);
            let x = Tensor::from_fn(&[1, n, d], |_| rng.normal());
            single(layer, &store, &x, |ctx, x, dir| {
                let rel = rel_t.iter().map(|r| ctx.tape.constant(r.clone())).collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(affine_coupling(ctx, "gc", x, 2, true, dir, |c| net.apply(ctx, c, &rel))?)
            })
        }
        "cca_coupling" => {
            let net = CcaCouplingNet::new(&mut store, "cc", 4, 4, 6, &mut rng);
            perturb(&mut store, &mut rng);
            let x = Tensor::from_fn(&[1, 8, 3, 3], |_| rng.normal());
            single(layer, &store, &x, |ctx, x, dir| Ok(affine_coupling(ctx, "cc", x, 1, false, dir, |c| net.apply(ctx, c))?))
        }
        "squeeze" => {
            let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.normal());
            single(layer, &store, &x, |ctx, x, dir| {
                let y = match dir {
                    Direction::Forward => squeeze(ctx.tape, x)?,
                    Direction::Inverse => unsqueeze(ctx.tape, x)?,
                };
                Ok((y, ctx.tape.constant(Tensor::zeros(&[1]))?))
            })
        }
        "merge" => {
            let x = Tensor::from_fn(&[1, 6, 2], |_| rng.normal());
            single(layer, &store, &x, |ctx, x, dir| {
                let y = match dir {
                    Direction::Forward => merge_features(ctx.tape, x, 3)?,
                    Direction::Inverse => unmerge_features(ctx.tape, x, 3)?,
                };
                Ok((y, ctx.tape.constant(Tensor::zeros(&[1]))?))
            })
        }
        "atom_flow" => {
            let (n, d) = (8, 4);
            let cfg = AtomFlowConfig { coarsen: vec![2, 2], steps: 2, gcn_layers: 1, gcn_hidden: 6, mlp_hidden: 6 };
            let flow = AtomFlow::new(&mut store, "atom", n, d, 4, &cfg, LuInit::RandomOrthogonal, &mut rng)?;
            let ls = store.add("log_sigma", Tensor::scalar(0.0));
            perturb(&mut store, &mut rng);
            let bonds = random_bonds(4, n, &mut rng);
            let x = Tensor::from_fn(&[1, n, d], |_| rng.normal());
            let shapes: Vec<Vec<usize>> = flow.latent_shapes().into_iter().map(|s| [vec![1], s].concat()).collect();
            let store = &store;
            measure(
                layer,
                &x,
                |p| {
                    let tape = Tape::new();
                    let ctx = Ctx::new(&tape, store);
                    let out = flow.forward(&ctx, tape.constant(p.clone())?, &bonds, ls)?;
                    Ok((flat(&tape, &out.latents), tape.value(out.logdet).item()))
                },
                |y| {
                    let zs = split_flat(y, &shapes)?;
                    let tape = Tape::new();
                    let ctx = Ctx::new(&tape, store);
                    let (x, _) = flow.inverse(&ctx, &bonds, &zs, ls, 1.0, &mut [FlowRng::new(0)])?;
                    Ok(tape.value(x).as_ref().clone())
                },
            )
        }
        "bond_flow" => {
            let cfg = BondFlowConfig { blocks: 2, steps: 2, hidden: 6 };
            let flow = BondFlow::new(&mut store, "bond", 2, 4, &cfg, LuInit::RandomOrthogonal, &mut rng)?;
            let ls = store.add("log_sigma", Tensor::scalar(0.0));
            perturb(&mut store, &mut rng);
            let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.normal());
            let shapes: Vec<Vec<usize>> = flow.latent_shapes().into_iter().map(|s| [vec![1], s].concat()).collect();
            let store = &store;
            measure(
                layer,
                &x,
                |p| {
                    let tape = Tape::new();
                    let ctx = Ctx::new(&tape, store);
                    let out = flow.forward(&ctx, tape.constant(p.clone())?, ls)?;
                    Ok((flat(&tape, &out.latents), tape.value(out.logdet).item()))
                },
                |y| {
                    let zs = split_flat(y, &shapes)?;
                    let tape = Tape::new();
                    let ctx = Ctx::new(&tape, store);
                    let (x, _) = flow.inverse(&ctx, 1, &zs, ls, 1.0, &mut [FlowRng::new(0)])?;
                    Ok(tape.value(x).as_ref().clone())
                },
            )
        }
        other => Err(Error::Invalid(format!("unknown layer {other:?}; known: {}", LAYERS.join(", ")))),
    }
}

fn split_flat(y: &Tensor, shapes: &[Vec<usize>]) -> Result<Vec<Option<Tensor>>> {
    let mut off = 0;
    let mut out = Vec::new();
    for s in shapes {
        let len: usize = s.iter().product();
        out.push(Some(Tensor::new(s, y.data()[off..off + len].to_vec())?));
        off += len;
    }
    Ok(out)
}

/// One element, two atoms, two bond channels and one step per flow.
pub fn micro_config() -> Config {
    let mut c = Config::toy();
    c.n = 2;
    c.d_pad = 2;
    c.bond_channels = 2;
    c.elements = ElementTable::new(&[("C", 4)]).expect("one element");
    c.atom.coarsen = vec![];
    c.atom.steps = 1;
    c.atom.gcn_layers = 1;
    c.atom.gcn_hidden = 2;
    c.atom.mlp_hidden = 2;
    c.bond.blocks = 1;
    c.bond.steps = 1;
    c.bond.hidden = 2;
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub params: usize,
    /// Largest `|g - fd| / max(|g|, |fd|, 1e-4)` over all parameters.
    pub max_rel: f64,
    pub pass: bool,
}

/// Analytic NLL gradients of a randomly perturbed micro-model against
/// central differences on a two-graph batch.
pub fn gradient_check(seed: u64) -> Result<GradientReport> {
    let mut m = FlowModel::new(micro_config())?;
    let mut rng = FlowRng::new(seed);
    for id in m.params.ids().collect::<Vec<_>>() {
        if m.params.is_trainable(id) {
            let v = m.params.get(id).map(|x| x + 0.3 * rng.normal());
            m.params.set(id, v);
        }
    }
    let x = Tensor::from_fn(&[2, 2, 2], |_| rng.uniform());
    let a = Tensor::from_fn(&[2, 2, 2, 2], |_| rng.uniform());
    let mut onehot = Tensor::zeros(&[2, 2, 2, 2]);
    for b in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                onehot.set(&[b, usize::from(b == 1 && i != j), i, j], 1.0);
            }
        }
    }
    let loss_at = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let l = nll(&m, &ctx, tape.constant(x.clone())?, tape.constant(a.clone())?, &onehot)?;
        Ok(tape.value(l).item())
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &m.params);
    let l = nll(&m, &ctx, tape.constant(x.clone())?, tape.constant(a.clone())?, &onehot)?;
    let grads = tape.backward(l)?;
    let mut max_rel: f64 = 0.0;
    for id in m.params.ids() {
        if !m.params.is_trainable(id) {
            continue;
        }
        let analytic = grads.param(id, &m.params);
        let fd = fd_gradient(
            |probe| {
                let mut store = m.params.clone();
                store.set(id, probe.clone());
                loss_at(&store).unwrap_or(f64::NAN)
            },
            m.params.get(id),
            1e-6,
        );
        for (g, f) in analytic.data().iter().zip(fd.data()) {
            let rel = (g - f).abs() / g.abs().max(f.abs()).max(1e-4);
            max_rel = if rel.is_nan() { f64::INFINITY } else { max_rel.max(rel) };
        }
    }
    let params = m.params.num_trainable();
    Ok(GradientReport { params, max_rel, pass: params <= 500 && max_rel < GRADIENT_TOL })
}

/// Checks the named layers (`"all"` expands to every layer).
pub fn run(layers: &[String], seed: u64) -> Result<Vec<ConformanceRow>> {
    let names: Vec<String> = if layers.iter().any(|l| l == "all") {
        LAYERS.iter().map(|s| s.to_string()).collect()
    } else {
        layers.to_vec()
    };
    names.iter().map(|l| check_layer(l, seed)).collect()
}

pub fn table(rows: &[ConformanceRow]) -> String {
    let mut out = String::from("layer\troundtrip\tlogdet\tlogdet_fd\tlogdet_rel\tpass\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.3e}\t{:.6}\t{:.6}\t{:.3e}\t{}\n",
            r.layer, r.roundtrip, r.logdet, r.logdet_fd, r.logdet_rel, r.pass
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_conforms() {
        let rows = run(&["all".to_string()], 3).unwrap();
        assert_eq!(rows.len(), LAYERS.len());
        for r in &rows {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn volume_preserving_layers_have_zero_logdet() {
        for l in ["squeeze", "merge"] {
            let r = check_layer(l, 1).unwrap();
            assert_eq!(r.logdet, 0.0);
            assert_eq!(r.roundtrip, 0.0);
        }
    }

    #[test]
    fn micro_gradients_conform() {
        let r = gradient_check(2).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn unknown_layer_rejected() {
        assert!(check_layer("glow", 0).is_err());
    }
}
