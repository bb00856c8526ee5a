//! Dense and convolutional building blocks for coupling and prior networks.

use super::{Ctx, FlowResult};
use crate::numerics::{FlowRng, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    /// Gaussian with variance `1 / fan_in`.
    Random,
    Zero,
}

fn weights(shape: &[usize], fan_in: usize, init: WeightInit, rng: &mut FlowRng) -> Tensor {
    match init {
        WeightInit::Zero => Tensor::zeros(shape),
        WeightInit::Random => {
            let s = (1.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| s * rng.normal())
        }
    }
}

/// `y = x W + b` over the last axis of a tensor of any rank.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    fin: usize,
    fout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, init: WeightInit, rng: &mut FlowRng) -> Self {
        let w = store.add(format!("{name}.w"), weights(&[fin, fout], fin, init, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fout]));
        Self { w, b, fin, fout }
    }

    pub fn apply(&self, ctx: &Ctx, x: Var) -> FlowResult<Var> {
        let t = ctx.tape;
        let shape = t.shape(x);
        let rows = shape.iter().product::<usize>() / self.fin;
        let flat = t.reshape(x, &[rows, self.fin])?;
        let y = t.add(t.matmul(flat, ctx.p(self.w))?, ctx.p(self.b))?;
        let mut out = shape.clone();
        *out.last_mut().expect("rank >= 1") = self.fout;
        Ok(t.reshape(y, &out)?)
    }
}

/// 3x3 convolution with padding 1 and a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, init: WeightInit, rng: &mut FlowRng) -> Self {
        let w = store.add(format!("{name}.w"), weights(&[cout, cin, 3, 3], cin * 9, init, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, cout, 1, 1]));
        Self { w, b }
    }

    pub fn apply(&self, ctx: &Ctx, x: Var) -> FlowResult<Var> {
        let t = ctx.tape;
        Ok(t.add(t.conv3x3(x, ctx.p(self.w))?, ctx.p(self.b))?)
    }
}

/// 1x1 convolution with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv1 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, init: WeightInit, rng: &mut FlowRng) -> Self {
        let w = store.add(format!("{name}.w"), weights(&[cout, cin], cin, init, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, cout, 1, 1]));
        Self { w, b }
    }

    pub fn apply(&self, ctx: &Ctx, x: Var) -> FlowResult<Var> {
        let t = ctx.tape;
        Ok(t.add(t.conv1x1(x, ctx.p(self.w))?, ctx.p(self.b))?)
    }
}
