//! Space-to-depth by a factor of 2. Output channel `4c + s` holds sub-pixel
//! `s` of input channel `c`, with `s` ordered top-left, top-right,
//! bottom-left, bottom-right.

use super::{FlowError, FlowResult};
use crate::numerics::{Tape, Var};

pub fn squeeze(tape: &Tape, x: Var) -> FlowResult<Var> {
    let s = tape.shape(x);
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(FlowError::OddSpatialDim(if h % 2 != 0 { h } else { w }));
    }
    let y = tape.reshape(x, &[b, c, h / 2, 2, w / 2, 2])?;
    let y = tape.permute(y, &[0, 1, 3, 5, 2, 4])?;
    Ok(tape.reshape(y, &[b, 4 * c, h / 2, w / 2])?)
}

pub fn unsqueeze(tape: &Tape, x: Var) -> FlowResult<Var> {
    let s = tape.shape(x);
    let (b, c4, h, w) = (s[0], s[1], s[2], s[3]);
    if c4 % 4 != 0 {
        return Err(FlowError::Config(format!("{c4} channels cannot unsqueeze")));
    }
    let c = c4 / 4;
    let y = tape.reshape(x, &[b, c, 2, 2, h, w])?;
    let y = tape.permute(y, &[0, 1, 4, 2, 5, 3])?;
    Ok(tape.reshape(y, &[b, c, 2 * h, 2 * w])?)
}
