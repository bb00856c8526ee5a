//! Relational graph convolution and the graph coupling network.

use crate::flowcore::{Ctx, FlowResult, InLayer, Linear, WeightInit};
use crate::numerics::{FlowRng, ParamStore, Tensor, Var};

/// Row-normalized relation matrices `D^{-1} A_c` from the real-bond
/// channels `a` (`[B, 3, n, n]`), with `D_ii = sum_c sum_j A_c[i, j]` and
/// zero rows where `D_ii = 0`. Returned as one `[B, n, n]` tensor per
/// relation.
pub fn normalized_relations(a: &Tensor) -> Vec<Tensor> {
    let s = a.shape();
    let (bs, rel, n) = (s[0], s[1], s[2]);
    let mut deg = vec![0.0; bs * n];
    for b in 0..bs {
        for c in 0..rel {
            for i in 0..n {
                let row = &a.data()[((b * rel + c) * n + i) * n..((b * rel + c) * n + i + 1) * n];
                deg[b * n + i] += row.iter().sum::<f64>();
            }
        }
    }
    (0..rel)
        .map(|c| {
            Tensor::from_fn(&[bs, n, n], |k| {
                let (b, i, j) = (k / (n * n), (k / n) % n, k % n);
                let d = deg[b * n + i];
                if d == 0.0 {
                    0.0
                } else {
                    a.data()[((b * rel + c) * n + i) * n + j] / d
                }
            })
        })
        .collect()
}

/// `H' = sum_c D^{-1} A_c H W_c + H W_0 + bias`, with the `W`s stacked into
/// one `[(1 + relations) f, f']` map.
#[derive(Clone, Debug)]
pub struct RgcnConv {
    pub lin: Linear,
}

impl RgcnConv {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, relations: usize, rng: &mut FlowRng) -> Self {
        Self { lin: Linear::new(store, name, (1 + relations) * fin, fout, WeightInit::Random, rng) }
    }

    pub fn apply(&self, ctx: &Ctx, h: Var, rel: &[Var]) -> FlowResult<Var> {
        let t = ctx.tape;
        let mut parts = vec![h];
        for &r in rel {
            parts.push(t.bmm(r, h)?);
        }
        self.lin.apply(ctx, t.concat(&parts, 2)?)
    }
}

/// R-GCN stack followed by a per-node MLP whose last layer starts at zero;
/// outputs `(s, t)` of width `out`.
#[derive(Clone, Debug)]
pub struct GraphCouplingNet {
    convs: Vec<RgcnConv>,
    hidden: Linear,
    last: Linear,
    name: String,
}

impl GraphCouplingNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fin: usize,
        out: usize,
        relations: usize,
        layers: usize,
        gcn_hidden: usize,
        mlp_hidden: usize,
        rng: &mut FlowRng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut width = fin;
        for l in 0..layers {
            convs.push(RgcnConv::new(store, &format!("{name}.gcn{l}"), width, gcn_hidden, relations, rng));
            width = gcn_hidden;
        }
        let hidden = Linear::new(store, &format!("{name}.mlp0"), width, mlp_hidden, WeightInit::Random, rng);
        let last = Linear::new(store, &format!("{name}.mlp1"), mlp_hidden, 2 * out, WeightInit::Zero, rng);
        Self { convs, hidden, last, name: name.to_string() }
    }

    pub fn apply(&self, ctx: &Ctx, h: Var, rel: &[Var]) -> FlowResult<(Var, Var)> {
        let t = ctx.tape;
        let mut x = h;
        for c in &self.convs {
            x = t.swish(c.apply(ctx, x, rel)?).in_layer(&self.name)?;
        }
        x = t.swish(self.hidden.apply(ctx, x)?).in_layer(&self.name)?;
        let st = self.last.apply(ctx, x)?;
        let half = t.shape(st)[2] / 2;
        let parts = t.split(st, 2, &[half, half])?;
        Ok((parts[0], parts[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn two_node_example() {
        let mut store = ParamStore::new();
        let conv = RgcnConv::new(&mut store, "g", 1, 1, 3, &mut FlowRng::new(0));
        store.set(conv.lin.w, Tensor::new(&[4, 1], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let mut a = Tensor::zeros(&[1, 3, 2, 2]);
        a.set(&[0, 0, 0, 1], 1.0);
        a.set(&[0, 0, 1, 0], 1.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let rel: Vec<Var> = normalized_relations(&a).into_iter().map(|r| tape.constant(r).unwrap()).collect();
        let h = tape.leaf(Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        let out = conv.apply(&ctx, h, &rel).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 1.0]);
    }

    #[test]
    fn isolated_node_keeps_self_term() {
        let mut store = ParamStore::new();
        let conv = RgcnConv::new(&mut store, "g", 1, 1, 3, &mut FlowRng::new(0));
        store.set(conv.lin.w, Tensor::new(&[4, 1], vec![1.0, 5.0, 5.0, 5.0]).unwrap());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let rel: Vec<Var> = normalized_relations(&Tensor::zeros(&[1, 3, 1, 1]))
            .into_iter()
            .map(|r| tape.constant(r).unwrap())
            .collect();
        let h = tape.leaf(Tensor::new(&[1, 1, 1], vec![2.5]).unwrap()).unwrap();
        assert_eq!(tape.value(conv.apply(&ctx, h, &rel).unwrap()).data(), &[2.5]);
    }

    #[test]
    fn normalization_divides_by_total_degree() {
        let mut a = Tensor::zeros(&[1, 3, 3, 3]);
        a.set(&[0, 0, 0, 1], 1.0);
        a.set(&[0, 1, 0, 2], 1.0);
        let r = normalized_relations(&a);
        assert_eq!(r[0].at(&[0, 0, 1]), 0.5);
        assert_eq!(r[1].at(&[0, 0, 2]), 0.5);
        assert_eq!(r[0].at(&[0, 2, 0]), 0.0);
    }
}
