//! Invertible channel mixing `W = P L (U + diag(sign * exp(log_s)))`.
//!
//! `P` and `sign` are frozen at construction, `L` is unit lower triangular
//! and `U` strictly upper triangular.

use nalgebra::DMatrix;

use super::{Ctx, Direction, FlowResult, InLayer, Layout};
use crate::numerics::{FlowRng, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LuInit {
    Identity,
    /// A random orthogonal matrix factored into `P, L, U, sign, log_s`.
    RandomOrthogonal,
}

#[derive(Clone, Debug)]
pub struct InvLu {
    pub perm: ParamId,
    pub sign: ParamId,
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_s: ParamId,
    layout: Layout,
    c: usize,
    name: String,
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_slice(r, c, t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |k| m[(k / m.ncols(), k % m.ncols())])
}

fn mask(c: usize, lower: bool) -> Tensor {
    Tensor::from_fn(&[c, c], |k| {
        let (i, j) = (k / c, k % c);
        if (lower && i > j) || (!lower && i < j) {
            1.0
        } else {
            0.0
        }
    })
}

impl InvLu {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, layout: Layout, init: LuInit, rng: &mut FlowRng) -> Self {
        let (p, l, u, sign, log_s) = match init {
            LuInit::Identity => (Tensor::eye(c), Tensor::zeros(&[c, c]), Tensor::zeros(&[c, c]), Tensor::ones(&[1, c]), Tensor::zeros(&[1, c])),
            LuInit::RandomOrthogonal => {
                let a = DMatrix::from_fn(c, c, |_, _| rng.normal());
                let q = a.qr().q();
                let lu = q.lu();
                let mut pm = DMatrix::<f64>::identity(c, c);
                lu.p().permute_rows(&mut pm);
                let (lm, um) = (lu.l(), lu.u());
                let diag: Vec<f64> = (0..c).map(|i| um[(i, i)]).collect();
                let strict_l = Tensor::from_fn(&[c, c], |k| if k / c > k % c { lm[(k / c, k % c)] } else { 0.0 });
                let strict_u = Tensor::from_fn(&[c, c], |k| if k / c < k % c { um[(k / c, k % c)] } else { 0.0 });
                (
                    from_dmatrix(&pm.transpose()),
                    strict_l,
                    strict_u,
                    Tensor::new(&[1, c], diag.iter().map(|d| d.signum()).collect()).expect("shape"),
                    Tensor::new(&[1, c], diag.iter().map(|d| d.abs().ln()).collect()).expect("shape"),
                )
            }
        };
        Self {
            perm: store.add_frozen(format!("{name}.perm"), p),
            sign: store.add_frozen(format!("{name}.sign"), sign),
            lower: store.add(format!("{name}.lower"), l),
            upper: store.add(format!("{name}.upper"), u),
            log_s: store.add(format!("{name}.log_s"), log_s),
            layout,
            c,
            name: name.to_string(),
        }
    }

    /// `W` on the tape.
    fn weight_var(&self, ctx: &Ctx) -> FlowResult<Var> {
        let t = ctx.tape;
        let eye = t.constant(Tensor::eye(self.c))?;
        let l = t.add(t.mul(ctx.p(self.lower), t.constant(mask(self.c, true))?)?, eye)?;
        let diag = t.mul(t.mul(ctx.p(self.sign), t.exp(ctx.p(self.log_s))?)?, eye)?;
        let u = t.add(t.mul(ctx.p(self.upper), t.constant(mask(self.c, false))?)?, diag)?;
        Ok(t.matmul(ctx.p(self.perm), t.matmul(l, u)?)?)
    }

    /// The current weight matrix `W` as a plain tensor.
    pub fn weight(&self, store: &ParamStore) -> Tensor {
        let c = self.c;
        let p = to_dmatrix(store.get(self.perm));
        let l = to_dmatrix(&Tensor::from_fn(&[c, c], |k| match (k / c, k % c) {
            (i, j) if i == j => 1.0,
            (i, j) if i > j => store.get(self.lower).data()[k],
            _ => 0.0,
        }));
        let u = to_dmatrix(&self.upper_with_diag(store));
        from_dmatrix(&(p * l * u))
    }

    fn upper_with_diag(&self, store: &ParamStore) -> Tensor {
        let c = self.c;
        let (sign, log_s) = (store.get(self.sign).data(), store.get(self.log_s).data());
        Tensor::from_fn(&[c, c], |k| match (k / c, k % c) {
            (i, j) if i == j => sign[i] * log_s[i].exp(),
            (i, j) if i < j => store.get(self.upper).data()[k],
            _ => 0.0,
        })
    }

    /// `W^{-1} = U^{-1} L^{-1} P^T` by triangular solves.
    fn inverse_weight(&self, store: &ParamStore) -> Tensor {
        let c = self.c;
        let pt = to_dmatrix(store.get(self.perm)).transpose();
        let l = DMatrix::from_fn(c, c, |i, j| match () {
            _ if i == j => 1.0,
            _ if i > j => store.get(self.lower).data()[i * c + j],
            _ => 0.0,
        });
        let u = to_dmatrix(&self.upper_with_diag(store));
        let y = l.solve_lower_triangular(&pt).expect("unit diagonal");
        let z = u.solve_upper_triangular(&y).expect("exp(log_s) > 0");
        from_dmatrix(&z)
    }

    pub fn apply(&self, ctx: &Ctx, x: Var, dir: Direction) -> FlowResult<(Var, Var)> {
        let t = ctx.tape;
        let shape = t.shape(x);
        let w = match dir {
            Direction::Forward => self.weight_var(ctx)?,
            Direction::Inverse => t.constant(self.inverse_weight(ctx.params))?,
        };
        let y = match self.layout {
            Layout::Features => {
                let rows = shape[0] * shape[1];
                let flat = t.reshape(x, &[rows, self.c])?;
                let y = t.matmul(flat, t.transpose(w)?).in_layer(&self.name)?;
                t.reshape(y, &shape)?
            }
            Layout::Channels => t.conv1x1(x, w).in_layer(&self.name)?,
        };
        let positions = (shape.iter().product::<usize>() / (shape[0] * self.c)) as f64;
        let per = t.scale(t.sum(ctx.p(self.log_s))?, if dir == Direction::Forward { positions } else { -positions })?;
        let logdet = t.add(t.constant(Tensor::zeros(&[shape[0]]))?, per)?;
        Ok((y, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_jacobian_logdet, Tape};

    #[test]
    fn identity_init() {
        let mut store = ParamStore::new();
        let lu = InvLu::new(&mut store, "lu", 3, Layout::Features, LuInit::Identity, &mut FlowRng::new(0));
        assert_eq!(lu.weight(&store), Tensor::eye(3));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(Tensor::from_fn(&[2, 2, 3], |k| k as f64)).unwrap();
        let (y, ld) = lu.apply(&ctx, x, Direction::Forward).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert_eq!(tape.value(ld).data(), &[0.0, 0.0]);
    }

    #[test]
    fn two_by_two_example() {
        let mut store = ParamStore::new();
        let lu = InvLu::new(&mut store, "lu", 2, Layout::Features, LuInit::Identity, &mut FlowRng::new(0));
        store.set(lu.lower, Tensor::new(&[2, 2], vec![0.0, 0.0, 0.5, 0.0]).unwrap());
        store.set(lu.upper, Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        store.set(lu.log_s, Tensor::new(&[1, 2], vec![2f64.ln(), 0.5f64.ln()]).unwrap());
        let w = lu.weight(&store);
        assert!(w.max_abs_diff(&Tensor::new(&[2, 2], vec![2.0, 1.0, 1.0, 1.0]).unwrap()) < 1e-12);
        let det = w.data()[0] * w.data()[3] - w.data()[1] * w.data()[2];
        assert!((det - 1.0).abs() < 1e-12);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2])).unwrap();
        let (_, ld) = lu.apply(&ctx, x, Direction::Forward).unwrap();
        assert!(tape.value(ld).item().abs() < 1e-12);
    }

    #[test]
    fn random_init_reproduces_orthogonal_matrix() {
        let mut store = ParamStore::new();
        let c = 5;
        let lu = InvLu::new(&mut store, "lu", c, Layout::Channels, LuInit::RandomOrthogonal, &mut FlowRng::new(7));
        let w = to_dmatrix(&lu.weight(&store));
        let gram = w.transpose() * &w;
        assert!((gram - DMatrix::<f64>::identity(c, c)).abs().max() < 1e-6);
        let mut rng = FlowRng::new(7);
        let a = DMatrix::from_fn(c, c, |_, _| rng.normal());
        assert!((a.qr().q() - w).abs().max() < 1e-6);
        assert!(!store.is_trainable(lu.perm) && store.is_trainable(lu.log_s));
    }

    #[test]
    fn round_trip_and_fd_logdet() {
        let mut rng = FlowRng::new(4);
        for layout in [Layout::Features, Layout::Channels] {
            let mut store = ParamStore::new();
            let lu = InvLu::new(&mut store, "lu", 4, layout, LuInit::RandomOrthogonal, &mut rng);
            store.set(lu.log_s, Tensor::from_fn(&[1, 4], |_| 0.3 * rng.normal()));
            store.set(lu.lower, Tensor::from_fn(&[4, 4], |_| 0.3 * rng.normal()));
            let shape = match layout {
                Layout::Features => vec![1, 3, 4],
                Layout::Channels => vec![1, 4, 2, 2],
            };
            let x = Tensor::from_fn(&shape, |_| rng.normal());
            let run = |inp: &Tensor, dir| {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store);
                let v = tape.leaf(inp.clone()).unwrap();
                let (y, ld) = lu.apply(&ctx, v, dir).unwrap();
                (tape.value(y).as_ref().clone(), tape.value(ld).item())
            };
            let (y, ld) = run(&x, Direction::Forward);
            let (back, ild) = run(&y, Direction::Inverse);
            assert!(back.max_abs_diff(&x) < 1e-10);
            assert!((ld + ild).abs() < 1e-12);
            let fd = fd_jacobian_logdet(|p| run(p, Direction::Forward).0, &x, 1e-5).unwrap();
            assert!((fd - ld).abs() / ld.abs().max(1e-3) < 1e-3, "fd {fd} vs {ld}");
        }
    }
}
