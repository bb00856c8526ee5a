//! BFS atom ordering and the padded one-hot encoding `(X, A)`.

use std::collections::VecDeque;

use super::{ElementTable, MolError, MolGraph};
use crate::numerics::Tensor;

/// Bond channels: no-bond, single, double, triple.
pub const BOND_CHANNELS: usize = 4;

/// Breadth-first order from atom 0 with ascending-index tie-breaks. Further
/// components follow in order of their smallest atom index.
pub fn bfs_order(g: &MolGraph) -> Vec<usize> {
    let adj = g.adjacency();
    let mut seen = vec![false; g.num_atoms()];
    let mut order = Vec::with_capacity(g.num_atoms());
    for s in 0..g.num_atoms() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    order
}

/// One-hot atom matrix `x` (`[n, d]`) and bond tensor `a` (`[4, n, n]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGraph {
    pub x: Tensor,
    pub a: Tensor,
}

impl EncodedGraph {
    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.x.shape()[1]
    }
}

/// Encodes `g` as given (callers BFS-order it first). Rows past the last
/// atom are virtual and use the pad channel.
pub fn encode(g: &MolGraph, n: usize, d_pad: usize, table: &ElementTable) -> Result<EncodedGraph, MolError> {
    if g.num_atoms() > n {
        return Err(MolError::TooManyAtoms { atoms: g.num_atoms(), n });
    }
    if d_pad < table.len() + 1 {
        return Err(MolError::BadTable(format!("d_pad {d_pad} leaves no pad channel for {} elements", table.len())));
    }
    let mut x = Tensor::zeros(&[n, d_pad]);
    for row in 0..n {
        let ch = match g.atoms().get(row) {
            Some(sym) => table.channel(sym).ok_or_else(|| MolError::UnknownElement(sym.clone()))?,
            None => table.pad_channel(),
        };
        x.set(&[row, ch], 1.0);
    }
    let mut a = Tensor::zeros(&[BOND_CHANNELS, n, n]);
    for i in 0..n {
        for j in 0..n {
            a.set(&[0, i, j], 1.0);
        }
    }
    for b in g.bonds() {
        let c = b.order as usize;
        for (i, j) in [(b.i, b.j), (b.j, b.i)] {
            a.set(&[0, i, j], 0.0);
            a.set(&[c, i, j], 1.0);
        }
    }
    Ok(EncodedGraph { x, a })
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Argmax decoding of real-valued `x` (`[n, d]`) and `a` (`[b, n, n]`).
/// Each bond channel is symmetrized first; ties go to the lowest channel.
/// Rows decoding to the pad or a null channel are dropped along with their
/// bonds.
pub fn decode(x: &Tensor, a: &Tensor, table: &ElementTable) -> MolGraph {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let b = a.shape()[0];
    let mut g = MolGraph::new();
    let mut slot = vec![None; n];
    for (row, s) in slot.iter_mut().enumerate() {
        let ch = argmax((0..d).map(|c| x.at(&[row, c])));
        if let Some(sym) = table.symbol(ch) {
            *s = Some(g.add_atom(sym));
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let (Some(p), Some(q)) = (slot[i], slot[j]) else { continue };
            let c = argmax((0..b).map(|c| 0.5 * (a.at(&[c, i, j]) + a.at(&[c, j, i]))));
            if c > 0 {
                g.add_bond(p, q, c.min(3) as u8).expect("fresh pair");
            }
        }
    }
    g
}
