//! Affine coupling with the bounded rescale `r(u) = 2 sigmoid(swish(u))`.

use super::{halves, Ctx, Direction, FlowError, FlowResult, InLayer};
use crate::numerics::{Tape, TensorError, Var};

/// Scalar `r(u)`.
pub fn rescale(u: f64) -> f64 {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    2.0 * sig(u * sig(u))
}

pub fn rescale_r(tape: &Tape, u: Var) -> Result<Var, TensorError> {
    tape.scale(tape.sigmoid(tape.swish(u)?)?, 2.0)
}

/// Splits `x` in halves along `axis`; one half conditions `net`, which
/// returns `(s, t)` shaped like the other half. Forward computes
/// `y = x * r(s) + t` on the transformed half, inverse undoes it. Returns the
/// output and the per-sample log-det, negated for the inverse.
pub fn affine_coupling(
    ctx: &Ctx,
    name: &str,
    x: Var,
    axis: usize,
    condition_on_first: bool,
    dir: Direction,
    net: impl FnOnce(Var) -> FlowResult<(Var, Var)>,
) -> FlowResult<(Var, Var)> {
    let t = ctx.tape;
    let (a, b) = halves(t, x, axis)?;
    let (cond, trans) = if condition_on_first { (a, b) } else { (b, a) };
    let (s, shift) = net(cond)?;
    let r = rescale_r(t, s).in_layer(name)?;
    let min = t.value(r).data().iter().cloned().fold(f64::INFINITY, f64::min);
    if min < 1e-7 {
        return Err(FlowError::ZeroScale { layer: name.to_string(), min });
    }
    let out = match dir {
        Direction::Forward => t.add(t.mul(trans, r)?, shift).in_layer(name)?,
        Direction::Inverse => t.div(t.sub(trans, shift)?, r).in_layer(name)?,
    };
    let logdet = t.sum_per_sample(t.log(r)?)?;
    let logdet = match dir {
        Direction::Forward => logdet,
        Direction::Inverse => t.neg(logdet)?,
    };
    let parts = if condition_on_first { [cond, out] } else { [out, cond] };
    Ok((t.concat(&parts, axis)?, logdet))
}
