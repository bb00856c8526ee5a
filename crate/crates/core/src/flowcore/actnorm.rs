//! Per-channel affine normalization, `y = (x + bias) * exp(log_scale)`.
//!
//! With [`Layout::Features`] this is the node-matrix variant that normalizes
//! the feature dimension.

use super::{Ctx, Direction, FlowError, FlowResult, InLayer, Layout};
use crate::numerics::{ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Actnorm {
    pub log_scale: ParamId,
    pub bias: ParamId,
    layout: Layout,
    channels: usize,
    name: String,
}

impl Actnorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, layout: Layout) -> Self {
        let shape = layout.param_shape(channels);
        Self {
            log_scale: store.add(format!("{name}.log_scale"), Tensor::zeros(&shape)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&shape)),
            layout,
            channels,
            name: name.to_string(),
        }
    }

    /// Per-channel population mean and std of `x`.
    fn stats(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let axis = self.layout.axis();
        let shape = x.shape();
        let inner: usize = shape[axis + 1..].iter().product();
        let c = self.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (k, &v) in x.data().iter().enumerate() {
            let ch = (k / inner) % c;
            sum[ch] += v;
            sq[ch] += v * v;
        }
        let count = (x.numel() / c) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0).sqrt()).collect();
        (mean, std)
    }

    pub fn apply(&self, ctx: &Ctx, x: Var, dir: Direction) -> FlowResult<(Var, Var)> {
        let t = ctx.tape;
        let shape = t.shape(x);
        let (log_scale, bias) = if ctx.is_initializing() && dir == Direction::Forward {
            let (mean, std) = self.stats(&t.value(x));
            if let Some((channel, &s)) = std.iter().enumerate().find(|(_, &s)| s < 1e-6) {
                return Err(FlowError::ZeroStd { layer: self.name.clone(), channel, std: s });
            }
            let pshape = self.layout.param_shape(self.channels);
            let ls = Tensor::new(&pshape, std.iter().map(|s| -s.ln()).collect())?;
            let b = Tensor::new(&pshape, mean.iter().map(|m| -m).collect())?;
            ctx.record_init(self.log_scale, ls.clone());
            ctx.record_init(self.bias, b.clone());
            (t.constant(ls)?, t.constant(b)?)
        } else {
            (ctx.p(self.log_scale), ctx.p(self.bias))
        };
        let count = (shape.iter().product::<usize>() / (shape[0] * self.channels)) as f64;
        let y = match dir {
            Direction::Forward => t.mul(t.add(x, bias)?, t.exp(log_scale)?),
            Direction::Inverse => t.sub(t.mul(x, t.exp(t.neg(log_scale)?)?)?, bias),
        }
        .in_layer(&self.name)?;
        let per = t.scale(t.sum(log_scale)?, if dir == Direction::Forward { count } else { -count })?;
        let logdet = t.add(t.constant(Tensor::zeros(&[shape[0]]))?, per)?;
        Ok((y, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_jacobian_logdet, FlowRng, Tape};

    #[test]
    fn data_init_standardizes_channels() {
        let mut store = ParamStore::new();
        let an = Actnorm::new(&mut store, "an", 2, Layout::Channels);
        let mut rng = FlowRng::new(1);
        let x = Tensor::from_fn(&[8, 2, 3, 3], |k| {
            let ch = (k / 9) % 2;
            if ch == 0 {
                3.0 + 2.0 * rng.normal()
            } else {
                -1.0 + 0.5 * rng.normal()
            }
        });
        let tape = Tape::new();
        let ctx = Ctx::initializing(&tape, &store);
        let v = tape.leaf(x).unwrap();
        let (y, _) = an.apply(&ctx, v, Direction::Forward).unwrap();
        let (mean, std) = an.stats(&tape.value(y));
        for c in 0..2 {
            assert!(mean[c].abs() < 1e-12);
            assert!((std[c] - 1.0).abs() < 1e-12);
        }
        let updates = ctx.into_updates();
        assert_eq!(updates.len(), 2);
        for (id, val) in updates {
            store.set(id, val);
        }
        // the stored parameters reproduce the init output
        let tape2 = Tape::new();
        let ctx2 = Ctx::new(&tape2, &store);
        let v2 = tape2.leaf(tape.value(v).as_ref().clone()).unwrap();
        let (y2, _) = an.apply(&ctx2, v2, Direction::Forward).unwrap();
        assert!(tape2.value(y2).max_abs_diff(&tape.value(y)) < 1e-12);
    }

    #[test]
    fn constant_channel_rejected() {
        let mut store = ParamStore::new();
        let an = Actnorm::new(&mut store, "an", 1, Layout::Features);
        let tape = Tape::new();
        let ctx = Ctx::initializing(&tape, &store);
        let v = tape.leaf(Tensor::full(&[2, 3, 1], 4.0)).unwrap();
        assert!(matches!(an.apply(&ctx, v, Direction::Forward), Err(FlowError::ZeroStd { .. })));
    }

    #[test]
    fn identity_at_zero_params() {
        let mut store = ParamStore::new();
        let an = Actnorm::new(&mut store, "an", 3, Layout::Features);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let v = tape.leaf(Tensor::from_fn(&[2, 4, 3], |k| k as f64)).unwrap();
        let (y, ld) = an.apply(&ctx, v, Direction::Forward).unwrap();
        assert_eq!(tape.value(y), tape.value(v));
        assert_eq!(tape.value(ld).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matrix_logdet_counts_nodes() {
        let mut store = ParamStore::new();
        let an = Actnorm::new(&mut store, "an", 2, Layout::Features);
        store.set(an.log_scale, Tensor::full(&[1, 1, 2], 2f64.ln()));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let v = tape.leaf(Tensor::zeros(&[1, 5, 2])).unwrap();
        let (_, ld) = an.apply(&ctx, v, Direction::Forward).unwrap();
        assert!((tape.value(ld).item() - 10.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn round_trip_and_fd_logdet() {
        let mut rng = FlowRng::new(2);
        for layout in [Layout::Features, Layout::Channels] {
            let mut store = ParamStore::new();
            let an = Actnorm::new(&mut store, "an", 2, layout);
            let shape = match layout {
                Layout::Features => vec![1, 3, 2],
                Layout::Channels => vec![1, 2, 2, 2],
            };
            let pshape = layout.param_shape(2);
            store.set(an.log_scale, Tensor::from_fn(&pshape, |_| 0.5 * rng.normal()));
            store.set(an.bias, Tensor::from_fn(&pshape, |_| rng.normal()));
            let x = Tensor::from_fn(&shape, |_| rng.normal());
            let run = |inp: &Tensor, dir| {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store);
                let v = tape.leaf(inp.clone()).unwrap();
                let (y, ld) = an.apply(&ctx, v, dir).unwrap();
                (tape.value(y).as_ref().clone(), tape.value(ld).item())
            };
            let (y, ld) = run(&x, Direction::Forward);
            let (back, ild) = run(&y, Direction::Inverse);
            assert!(back.max_abs_diff(&x) < 1e-12);
            assert!((ld + ild).abs() < 1e-12);
            let fd = fd_jacobian_logdet(|p| run(p, Direction::Forward).0, &x, 1e-5).unwrap();
            assert!((fd - ld).abs() / ld.abs().max(1e-3) < 1e-3);
        }
    }
}
