//! Circular fingerprints hashed with 64-bit FNV-1a.
//!
//! Round 0 hashes `[0, symbol bytes, 0xff, degree u32 LE, incident orders
//! ascending]`. Round `r` hashes `[r, own previous hash u64 LE]` followed by
//! every neighbor's `(order, previous hash u64 LE)`, pairs sorted ascending.
//! Each hash sets bit `hash % bits`.

use std::hash::Hasher;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::molgraph::MolGraph;

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_BITS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fingerprint {
    width: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn empty(width: usize) -> Self {
        Self { width, words: vec![0; width.div_ceil(64)] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> Vec<usize> {
        (0..self.width).filter(|&b| self.get(b)).collect()
    }
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Per-atom invariants of rounds `0..=radius`.
pub(crate) fn invariants(g: &MolGraph, radius: usize) -> Vec<Vec<u64>> {
    let n = g.num_atoms();
    let mut rounds = Vec::with_capacity(radius + 1);
    let round0: Vec<u64> = (0..n)
        .map(|i| {
            let nb = g.neighbors(i);
            let mut orders: Vec<u8> = nb.iter().map(|&(_, o)| o).collect();
            orders.sort_unstable();
            let mut bytes = vec![0u8];
            bytes.extend_from_slice(g.atoms()[i].as_bytes());
            bytes.push(0xff);
            bytes.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            bytes.extend_from_slice(&orders);
            fnv(&bytes)
        })
        .collect();
    rounds.push(round0);
    for r in 1..=radius {
        let prev = &rounds[r - 1];
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut pairs: Vec<(u8, u64)> = g.neighbors(i).iter().map(|&(j, o)| (o, prev[j])).collect();
                pairs.sort_unstable();
                let mut bytes = vec![r as u8];
                bytes.extend_from_slice(&prev[i].to_le_bytes());
                for (o, h) in pairs {
                    bytes.push(o);
                    bytes.extend_from_slice(&h.to_le_bytes());
                }
                fnv(&bytes)
            })
            .collect();
        rounds.push(next);
    }
    rounds
}

pub fn fingerprint(g: &MolGraph, radius: usize, bits: usize) -> Result<Fingerprint> {
    if g.is_empty() || !g.is_connected() || bits == 0 {
        return Err(Error::InvalidMolecule);
    }
    let mut fp = Fingerprint::empty(bits);
    for round in invariants(g, radius) {
        for h in round {
            fp.set((h % bits as u64) as usize);
        }
    }
    Ok(fp)
}

/// `|a & b| / |a | b|`, 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.width != b.width {
        return Err(Error::WidthMismatch(a.width, b.width));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{parse_smiles, ElementTable};

    fn g(s: &str) -> MolGraph {
        parse_smiles(s, &ElementTable::zinc()).unwrap()
    }

    fn fp(s: &str) -> Fingerprint {
        fingerprint(&g(s), DEFAULT_RADIUS, DEFAULT_BITS).unwrap()
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn round_zero_matches_manual_encoding() {
        // methanol carbon: symbol C, degree 1, one single bond
        let inv = invariants(&g("CO"), 0);
        let manual = fnv(&[0, b'C', 0xff, 1, 0, 0, 0, 1]);
        assert_eq!(inv[0][0], manual);
    }

    #[test]
    fn identical_graphs_give_identical_fingerprints() {
        assert_eq!(fp("CC(=O)N"), fp("CC(=O)N"));
        assert_eq!(tanimoto(&fp("CC(=O)N"), &fp("CC(=O)N")).unwrap(), 1.0);
    }

    #[test]
    fn methane_and_water_share_nothing() {
        let (c, o) = (fp("C"), fp("O"));
        assert!(c.ones().iter().all(|b| !o.get(*b)));
        assert_eq!(c.count(), 3);
        assert_eq!(tanimoto(&c, &o).unwrap(), 0.0);
    }

    #[test]
    fn ethanol_and_ethylamine_overlap_partially() {
        let s = tanimoto(&fp("CCO"), &fp("CCN")).unwrap();
        assert!(s > 0.0 && s < 1.0, "{s}");
    }

    #[test]
    fn relabeling_does_not_change_fingerprint() {
        let a = g("CC(O)C=N");
        let b = a.permuted(&[3, 1, 4, 0, 2]);
        assert_eq!(fingerprint(&a, 2, 512).unwrap(), fingerprint(&b, 2, 512).unwrap());
    }

    #[test]
    fn subset_tanimoto_is_count_ratio() {
        let mut a = Fingerprint::empty(64);
        let mut b = Fingerprint::empty(64);
        for bit in [1, 5] {
            a.set(bit);
        }
        for bit in [1, 5, 9, 40] {
            b.set(bit);
        }
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.5);
        assert_eq!(tanimoto(&Fingerprint::empty(64), &Fingerprint::empty(64)).unwrap(), 1.0);
    }

    #[test]
    fn width_mismatch_and_invalid_input() {
        assert!(matches!(tanimoto(&Fingerprint::empty(64), &Fingerprint::empty(128)), Err(Error::WidthMismatch(64, 128))));
        assert!(matches!(fingerprint(&MolGraph::new(), 2, 64), Err(Error::InvalidMolecule)));
        let split = MolGraph::from_parts(&["C", "C"], &[]).unwrap();
        assert!(matches!(fingerprint(&split, 2, 64), Err(Error::InvalidMolecule)));
    }
}
