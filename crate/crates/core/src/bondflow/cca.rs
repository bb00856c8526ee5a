//! Criss-cross attention: every pixel attends over its row and column, the
//! shared pixel counted once.

use crate::flowcore::{Conv1, Conv3, Ctx, FlowResult, InLayer, WeightInit};
use crate::numerics::{FlowRng, ParamStore, Tensor, Var};

const MASKED: f64 = -1e30;

#[derive(Clone, Debug)]
pub struct Cca {
    pub query: Conv1,
    pub key: Conv1,
    pub value: Conv1,
    pub out: Conv1,
    name: String,
}

impl Cca {
    /// Query/key width is `max(1, c / 8)`. The output projection starts at
    /// zero, so a fresh layer is the identity.
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut FlowRng) -> Self {
        let qk = (c / 8).max(1);
        Self {
            query: Conv1::new(store, &format!("{name}.q"), c, qk, WeightInit::Random, rng),
            key: Conv1::new(store, &format!("{name}.k"), c, qk, WeightInit::Random, rng),
            value: Conv1::new(store, &format!("{name}.v"), c, c, WeightInit::Random, rng),
            out: Conv1::new(store, &format!("{name}.o"), c, c, WeightInit::Zero, rng),
            name: name.to_string(),
        }
    }

    /// Attention weights `[B, H, W, W + H]`: the first `W` entries cover row
    /// `i`, the last `H` cover column `j`, where entry `i` itself is masked
    /// to zero weight.
    pub fn attention(&self, ctx: &Ctx, h: Var) -> FlowResult<Var> {
        let t = ctx.tape;
        let s = t.shape(h);
        let (b, hh, ww) = (s[0], s[2], s[3]);
        let q = self.query.apply(ctx, h)?;
        let k = self.key.apply(ctx, h)?;
        let cq = t.shape(q)[1];
        let q_row = t.reshape(t.permute(q, &[0, 2, 3, 1])?, &[b * hh, ww, cq])?;
        let k_row = t.reshape(t.permute(k, &[0, 2, 1, 3])?, &[b * hh, cq, ww])?;
        let e_row = t.reshape(t.bmm(q_row, k_row)?, &[b, hh, ww, ww])?;
        let q_col = t.reshape(t.permute(q, &[0, 3, 2, 1])?, &[b * ww, hh, cq])?;
        let k_col = t.reshape(t.permute(k, &[0, 3, 1, 2])?, &[b * ww, cq, hh])?;
        let e_col = t.reshape(t.bmm(q_col, k_col)?, &[b, ww, hh, hh])?;
        let e_col = t.permute(e_col, &[0, 2, 1, 3])?;
        let mask = Tensor::from_fn(&[1, hh, 1, hh], |idx| if idx / hh == idx % hh { MASKED } else { 0.0 });
        let e_col = t.add(e_col, t.constant(mask)?)?;
        t.softmax(t.concat(&[e_row, e_col], 3)?, 3).in_layer(&self.name)
    }

    pub fn apply(&self, ctx: &Ctx, h: Var) -> FlowResult<Var> {
        let t = ctx.tape;
        let s = t.shape(h);
        let (b, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        let att = self.attention(ctx, h)?;
        let parts = t.split(att, 3, &[ww, hh])?;
        let v = self.value.apply(ctx, h)?;
        let a_row = t.reshape(parts[0], &[b * hh, ww, ww])?;
        let v_row = t.reshape(t.permute(v, &[0, 2, 3, 1])?, &[b * hh, ww, c])?;
        let o_row = t.reshape(t.bmm(a_row, v_row)?, &[b, hh, ww, c])?;
        let a_col = t.reshape(t.permute(parts[1], &[0, 2, 1, 3])?, &[b * ww, hh, hh])?;
        let v_col = t.reshape(t.permute(v, &[0, 3, 2, 1])?, &[b * ww, hh, c])?;
        let o_col = t.permute(t.reshape(t.bmm(a_col, v_col)?, &[b, ww, hh, c])?, &[0, 2, 1, 3])?;
        let agg = t.permute(t.add(o_row, o_col)?, &[0, 3, 1, 2])?;
        Ok(t.add(self.out.apply(ctx, agg)?, h)?)
    }
}

/// `conv3x3 -> swish -> CCA -> swish -> conv3x3`, the last convolution zero
/// at start; its `2 * cout` channels split into `(s, t)`.
#[derive(Clone, Debug)]
pub struct CcaCouplingNet {
    first: Conv3,
    cca: Cca,
    last: Conv3,
    name: String,
}

impl CcaCouplingNet {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, hidden: usize, rng: &mut FlowRng) -> Self {
        Self {
            first: Conv3::new(store, &format!("{name}.conv0"), cin, hidden, WeightInit::Random, rng),
            cca: Cca::new(store, &format!("{name}.cca"), hidden, rng),
            last: Conv3::new(store, &format!("{name}.conv1"), hidden, 2 * cout, WeightInit::Zero, rng),
            name: name.to_string(),
        }
    }

    pub fn apply(&self, ctx: &Ctx, x: Var) -> FlowResult<(Var, Var)> {
        let t = ctx.tape;
        let h = t.swish(self.first.apply(ctx, x)?).in_layer(&self.name)?;
        let h = t.swish(self.cca.apply(ctx, h)?).in_layer(&self.name)?;
        let st = self.last.apply(ctx, h)?;
        let c = t.shape(st)[1] / 2;
        let parts = t.split(st, 1, &[c, c])?;
        Ok((parts[0], parts[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn randomize(store: &mut ParamStore, rng: &mut FlowRng) {
        for id in store.ids().collect::<Vec<_>>() {
            let v = store.get(id).map(|_| 0.5 * rng.normal());
            store.set(id, v);
        }
    }

    #[test]
    fn single_pixel_returns_value_plus_input() {
        let mut store = ParamStore::new();
        let mut rng = FlowRng::new(1);
        let cca = Cca::new(&mut store, "cca", 3, &mut rng);
        store.set(cca.out.w, Tensor::eye(3));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let h = tape.leaf(Tensor::new(&[1, 3, 1, 1], vec![0.2, -1.0, 0.7]).unwrap()).unwrap();
        let o = cca.apply(&ctx, h).unwrap();
        let v = cca.value.apply(&ctx, h).unwrap();
        let want = tape.value(tape.add(v, h).unwrap());
        assert!(tape.value(o).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut store = ParamStore::new();
        let cca = Cca::new(&mut store, "cca", 4, &mut FlowRng::new(2));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let h = tape.leaf(Tensor::full(&[2, 4, 3, 3], 0.8)).unwrap();
        assert_eq!(tape.value(cca.apply(&ctx, h).unwrap()), tape.value(h));
    }

    #[test]
    fn weights_cover_row_and_column_once() {
        let mut store = ParamStore::new();
        let mut rng = FlowRng::new(3);
        let cca = Cca::new(&mut store, "cca", 8, &mut rng);
        randomize(&mut store, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let (hh, ww) = (4, 5);
        let h = tape.leaf(Tensor::from_fn(&[2, 8, hh, ww], |_| rng.normal())).unwrap();
        let att = tape.value(cca.attention(&ctx, h).unwrap());
        assert_eq!(att.shape(), &[2, hh, ww, ww + hh]);
        for b in 0..2 {
            for i in 0..hh {
                for j in 0..ww {
                    let total: f64 = (0..ww + hh).map(|k| att.at(&[b, i, j, k])).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                    assert_eq!(att.at(&[b, i, j, ww + i]), 0.0);
                    let live = (0..ww + hh).filter(|&k| att.at(&[b, i, j, k]) > 0.0).count();
                    assert_eq!(live, ww + hh - 1);
                }
            }
        }
    }

    #[test]
    fn attention_matches_direct_loop() {
        let mut store = ParamStore::new();
        let mut rng = FlowRng::new(4);
        let cca = Cca::new(&mut store, "cca", 2, &mut rng);
        randomize(&mut store, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let n = 3;
        let hv = tape.leaf(Tensor::from_fn(&[1, 2, n, n], |_| rng.normal())).unwrap();
        let out = tape.value(cca.apply(&ctx, hv).unwrap());
        let q = tape.value(cca.query.apply(&ctx, hv).unwrap());
        let k = tape.value(cca.key.apply(&ctx, hv).unwrap());
        let v = tape.value(cca.value.apply(&ctx, hv).unwrap());
        let (wo, bo) = (store.get(cca.out.w), store.get(cca.out.b));
        let h = tape.value(hv);
        for i in 0..n {
            for j in 0..n {
                let mut pos: Vec<(usize, usize)> = (0..n).map(|jj| (i, jj)).collect();
                pos.extend((0..n).filter(|&ii| ii != i).map(|ii| (ii, j)));
                let logits: Vec<f64> = pos.iter().map(|&(a, b)| q.at(&[0, 0, i, j]) * k.at(&[0, 0, a, b])).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let agg: Vec<f64> = (0..2)
                    .map(|c| pos.iter().zip(&logits).map(|(&(a, b), l)| (l - m).exp() / z * v.at(&[0, c, a, b])).sum())
                    .collect();
                for c in 0..2 {
                    let proj = bo.data()[c] + (0..2).map(|ci| wo.at(&[c, ci]) * agg[ci]).sum::<f64>();
                    assert!((out.at(&[0, c, i, j]) - (proj + h.at(&[0, c, i, j]))).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn coupling_net_shapes_and_zero_init() {
        let mut store = ParamStore::new();
        let net = CcaCouplingNet::new(&mut store, "net", 3, 3, 8, &mut FlowRng::new(5));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4, 4], |k| (k as f64).sin())).unwrap();
        let (s, sh) = net.apply(&ctx, x).unwrap();
        assert_eq!(tape.shape(s), vec![2, 3, 4, 4]);
        assert_eq!(*tape.value(s), Tensor::zeros(&[2, 3, 4, 4]));
        assert_eq!(*tape.value(sh), Tensor::zeros(&[2, 3, 4, 4]));
    }
}
