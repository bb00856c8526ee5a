//! Block-contiguous hard assignment: cluster `c` owns nodes `[c k, (c+1) k)`.

use crate::flowcore::{FlowError, FlowResult};
use crate::numerics::{Tape, Tensor, Var};

/// The `n x n/k` assignment matrix `S`.
pub fn assignment_matrix(n: usize, k: usize) -> FlowResult<Tensor> {
    if k == 0 || !n.is_multiple_of(k) {
        return Err(FlowError::IndivisibleN { n, k });
    }
    Ok(Tensor::from_fn(&[n, n / k], |idx| {
        let (row, col) = (idx / (n / k), idx % (n / k));
        if row / k == col {
            1.0
        } else {
            0.0
        }
    }))
}

/// `S^T A_c S` for every channel of `a` (`[channels, n, n]`), computed as
/// block sums.
pub fn coarsen_structure(a: &Tensor, k: usize) -> FlowResult<Tensor> {
    let s = a.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(FlowError::Tensor(crate::numerics::TensorError::BadShape { shape: s.to_vec(), len: a.numel() }));
    }
    let (ch, n) = (s[0], s[1]);
    if k == 0 || n % k != 0 {
        return Err(FlowError::IndivisibleN { n, k });
    }
    let m = n / k;
    let mut out = Tensor::zeros(&[ch, m, m]);
    let src = a.data();
    let dst = out.data_mut();
    for c in 0..ch {
        for i in 0..n {
            for j in 0..n {
                dst[(c * m + i / k) * m + j / k] += src[(c * n + i) * n + j];
            }
        }
    }
    Ok(out)
}

/// Coarsens every graph of a `[B, channels, n, n]` batch.
pub fn coarsen_batch(a: &Tensor, k: usize) -> FlowResult<Tensor> {
    let rows = (0..a.shape()[0]).map(|b| coarsen_structure(&a.index0(b), k)).collect::<FlowResult<Vec<_>>>()?;
    Ok(Tensor::stack(&rows)?)
}

/// `[B, n, d] -> [B, n/k, d k]`: each cluster row concatenates its members.
pub fn merge_features(tape: &Tape, h: Var, k: usize) -> FlowResult<Var> {
    let s = tape.shape(h);
    if k == 0 || !s[1].is_multiple_of(k) {
        return Err(FlowError::IndivisibleN { n: s[1], k });
    }
    Ok(tape.reshape(h, &[s[0], s[1] / k, s[2] * k])?)
}

pub fn unmerge_features(tape: &Tape, h: Var, k: usize) -> FlowResult<Var> {
    let s = tape.shape(h);
    if k == 0 || !s[2].is_multiple_of(k) {
        return Err(FlowError::IndivisibleN { n: s[2], k });
    }
    Ok(tape.reshape(h, &[s[0], s[1] * k, s[2] / k])?)
}
