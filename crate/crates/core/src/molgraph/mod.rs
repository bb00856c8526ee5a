//! Molecular graphs: element tables, kekulized SMILES, ordering, one-hot
//! encoding, valence checks, validity correction, and generation metrics.

mod dataset;
mod encode;
mod metrics;
mod smiles;
mod validity;

pub use dataset::{parse_dataset, read_dataset};
pub use encode::{bfs_order, decode, encode, EncodedGraph, BOND_CHANNELS};
pub use metrics::{canonical_smiles, compute_metrics, GenMetrics};
pub use smiles::{parse_smiles, write_smiles, write_smiles_with_order};
pub use validity::{check_valence, correct_validity};

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MolError {
    #[error("unsupported token {token:?} at position {pos}")]
    UnsupportedToken { token: char, pos: usize },
    #[error("unmatched ring closure {0}")]
    UnmatchedRingClosure(u32),
    #[error("unmatched parenthesis at position {0}")]
    UnmatchedParenthesis(usize),
    #[error("unknown element {0:?}")]
    UnknownElement(String),
    #[error("invalid bond between atoms {i} and {j}")]
    InvalidBond { i: usize, j: usize },
    #[error("bond symbol at position {0} is not followed by an atom or ring closure")]
    DanglingBond(usize),
    #[error("graph is disconnected")]
    DisconnectedGraph,
    #[error("{atoms} atoms do not fit {n} slots")]
    TooManyAtoms { atoms: usize, n: usize },
    #[error("graph has no atoms")]
    EmptyGraph,
    #[error("empty batch")]
    EmptyBatch,
    #[error("element table: {0}")]
    BadTable(String),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<MolError>,
    },
    #[error("io: {0}")]
    Io(String),
}

/// A typed bond with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

/// Element-labelled atoms and typed bonds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct MolGraph {
    atoms: Vec<String>,
    bonds: BTreeMap<(usize, usize), u8>,
}

impl MolGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(atoms: &[&str], bonds: &[(usize, usize, u8)]) -> Result<Self, MolError> {
        let mut g = Self::new();
        for a in atoms {
            g.add_atom(a);
        }
        for &(i, j, o) in bonds {
            g.add_bond(i, j, o)?;
        }
        Ok(g)
    }

    pub fn add_atom(&mut self, symbol: &str) -> usize {
        self.atoms.push(symbol.to_string());
        self.atoms.len() - 1
    }

    /// Adds a bond of order 1..=3. Self-bonds, duplicates and out-of-range
    /// indices are rejected.
    pub fn add_bond(&mut self, i: usize, j: usize, order: u8) -> Result<(), MolError> {
        let key = (i.min(j), i.max(j));
        if i == j || key.1 >= self.atoms.len() || !(1..=3).contains(&order) || self.bonds.contains_key(&key) {
            return Err(MolError::InvalidBond { i, j });
        }
        self.bonds.insert(key, order);
        Ok(())
    }

    pub fn atoms(&self) -> &[String] {
        &self.atoms
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Bonds sorted by `(i, j)`.
    pub fn bonds(&self) -> impl Iterator<Item = Bond> + '_ {
        self.bonds.iter().map(|(&(i, j), &order)| Bond { i, j, order })
    }

    pub fn bond_order(&self, i: usize, j: usize) -> Option<u8> {
        self.bonds.get(&(i.min(j), i.max(j))).copied()
    }

    /// Sets a bond's order; zero removes it.
    pub(crate) fn set_bond_order(&mut self, i: usize, j: usize, order: u8) {
        let key = (i.min(j), i.max(j));
        if order == 0 {
            self.bonds.remove(&key);
        } else {
            self.bonds.insert(key, order);
        }
    }

    /// Neighbors of `i` with bond orders, ascending by index.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, u8)> {
        let mut out: Vec<(usize, u8)> = self
            .bonds
            .iter()
            .filter_map(|(&(a, b), &o)| match () {
                _ if a == i => Some((b, o)),
                _ if b == i => Some((a, o)),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (&(i, j), &o) in &self.bonds {
            adj[i].push((j, o));
            adj[j].push((i, o));
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Sum of incident bond orders for every atom.
    pub fn valence_sums(&self) -> Vec<u32> {
        let mut v = vec![0u32; self.atoms.len()];
        for (&(i, j), &o) in &self.bonds {
            v[i] += o as u32;
            v[j] += o as u32;
        }
        v
    }

    /// Connected components, each sorted ascending, ordered by smallest index.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut comps = Vec::new();
        for s in 0..self.atoms.len() {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &(v, _) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Relabels atoms so that new atom `k` is old atom `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> MolGraph {
        assert_eq!(order.len(), self.atoms.len(), "permutation length");
        let mut inv = vec![0usize; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inv[old] = new;
        }
        let atoms = order.iter().map(|&o| self.atoms[o].clone()).collect();
        let bonds = self
            .bonds
            .iter()
            .map(|(&(i, j), &o)| {
                let (a, b) = (inv[i], inv[j]);
                ((a.min(b), a.max(b)), o)
            })
            .collect();
        MolGraph { atoms, bonds }
    }

    /// Subgraph induced by `keep` (any order), renumbered in that order.
    /// Bonds leaving the subset are dropped.
    pub fn induced(&self, keep: &[usize]) -> MolGraph {
        let mut map = vec![usize::MAX; self.atoms.len()];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let atoms = keep.iter().map(|&o| self.atoms[o].clone()).collect();
        let bonds = self
            .bonds
            .iter()
            .filter(|(&(i, j), _)| map[i] != usize::MAX && map[j] != usize::MAX)
            .map(|(&(i, j), &o)| {
                let (a, b) = (map[i], map[j]);
                ((a.min(b), a.max(b)), o)
            })
            .collect();
        MolGraph { atoms, bonds }
    }
}

/// Element symbols with maximum valences. The order fixes one-hot channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementTable {
    order: Vec<String>,
    max_valence: BTreeMap<String, u8>,
}

impl ElementTable {
    pub fn new(entries: &[(&str, u8)]) -> Result<Self, MolError> {
        let table = Self {
            order: entries.iter().map(|(s, _)| s.to_string()).collect(),
            max_valence: entries.iter().map(|(s, v)| (s.to_string(), *v)).collect(),
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<(), MolError> {
        if self.order.is_empty() {
            return Err(MolError::BadTable("no elements".into()));
        }
        for (k, s) in self.order.iter().enumerate() {
            if self.order[..k].contains(s) {
                return Err(MolError::BadTable(format!("duplicate element {s}")));
            }
            if !self.max_valence.contains_key(s) {
                return Err(MolError::BadTable(format!("no valence for {s}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, MolError> {
        let t: Self = serde_json::from_str(text).map_err(|e| MolError::BadTable(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn load(path: &Path) -> Result<Self, MolError> {
        let text = std::fs::read_to_string(path).map_err(|e| MolError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Nine-element set of drug-like datasets.
    pub fn zinc() -> Self {
        Self::new(&[
            ("C", 4),
            ("N", 3),
            ("O", 2),
            ("F", 1),
            ("P", 5),
            ("S", 6),
            ("Cl", 1),
            ("Br", 1),
            ("I", 1),
        ])
        .expect("static table")
    }

    /// Seven-element set for polymer-like datasets.
    pub fn polymer() -> Self {
        Self::new(&[("C", 4), ("N", 3), ("O", 2), ("F", 1), ("P", 5), ("S", 6), ("Cl", 1)]).expect("static table")
    }

    /// C, N, O only.
    pub fn organic_small() -> Self {
        Self::new(&[("C", 4), ("N", 3), ("O", 2)]).expect("static table")
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn channel(&self, symbol: &str) -> Option<usize> {
        self.order.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, channel: usize) -> Option<&str> {
        self.order.get(channel).map(String::as_str)
    }

    pub fn max_valence(&self, symbol: &str) -> Option<u8> {
        self.max_valence.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.order
    }

    /// One-hot channel marking padding (virtual) atoms.
    pub fn pad_channel(&self) -> usize {
        self.order.len()
    }
}
