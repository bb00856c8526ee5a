//! Kekulized SMILES over the organic subset: uppercase atoms, `-`, `=`, `#`,
//! branches and ring closures (`1`..`9`, `%nn`).

use std::collections::BTreeMap;

use super::{ElementTable, MolError, MolGraph};

pub fn parse_smiles(text: &str, table: &ElementTable) -> Result<MolGraph, MolError> {
    let chars: Vec<char> = text.trim().chars().collect();
    let mut g = MolGraph::new();
    let mut prev: Option<usize> = None;
    let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
    let mut pending: Option<(u8, usize)> = None;
    let mut rings: BTreeMap<u32, (usize, Option<u8>)> = BTreeMap::new();
    let mut pos = 0;

    while pos < chars.len() {
        let c = chars[pos];
        match c {
            'A'..='Z' => {
                let two: String = chars[pos..chars.len().min(pos + 2)].iter().collect();
                let symbol = if two == "Cl" || two == "Br" {
                    pos += 1;
                    two
                } else {
                    c.to_string()
                };
                if table.channel(&symbol).is_none() {
                    return Err(MolError::UnknownElement(symbol));
                }
                let idx = g.add_atom(&symbol);
                if let Some(p) = prev {
                    let order = pending.take().map_or(1, |(o, _)| o);
                    g.add_bond(p, idx, order)?;
                } else if let Some((_, at)) = pending {
                    return Err(MolError::DanglingBond(at));
                }
                prev = Some(idx);
            }
            '-' | '=' | '#' => {
                if pending.is_some() || prev.is_none() {
                    return Err(MolError::DanglingBond(pos));
                }
                let order = match c {
                    '-' => 1,
                    '=' => 2,
                    _ => 3,
                };
                pending = Some((order, pos));
            }
            '(' => {
                if prev.is_none() || pending.is_some() {
                    return Err(MolError::UnmatchedParenthesis(pos));
                }
                branches.push((prev, pos));
            }
            ')' => {
                if let Some((_, at)) = pending {
                    return Err(MolError::DanglingBond(at));
                }
                let (p, _) = branches.pop().ok_or(MolError::UnmatchedParenthesis(pos))?;
                prev = p;
            }
            '0'..='9' | '%' => {
                let num = if c == '%' {
                    let digits: String = chars[pos + 1..chars.len().min(pos + 3)].iter().collect();
                    if digits.len() != 2 || !digits.chars().all(|d| d.is_ascii_digit()) {
                        return Err(MolError::UnsupportedToken { token: '%', pos });
                    }
                    pos += 2;
                    digits.parse::<u32>().expect("two digits")
                } else {
                    c.to_digit(10).expect("digit")
                };
                let Some(atom) = prev else {
                    return Err(MolError::UnsupportedToken { token: c, pos });
                };
                let bond = pending.take().map(|(o, _)| o);
                match rings.remove(&num) {
                    Some((open, open_bond)) => {
                        let order = match (open_bond, bond) {
                            (Some(a), Some(b)) if a != b => return Err(MolError::InvalidBond { i: open, j: atom }),
                            (a, b) => b.or(a).unwrap_or(1),
                        };
                        g.add_bond(open, atom, order)?;
                    }
                    None => {
                        rings.insert(num, (atom, bond));
                    }
                }
            }
            _ => return Err(MolError::UnsupportedToken { token: c, pos }),
        }
        pos += 1;
    }
    if let Some((_, at)) = branches.last() {
        return Err(MolError::UnmatchedParenthesis(*at));
    }
    if let Some((&num, _)) = rings.iter().next() {
        return Err(MolError::UnmatchedRingClosure(num));
    }
    if let Some((_, at)) = pending {
        return Err(MolError::DanglingBond(at));
    }
    if g.is_empty() {
        return Err(MolError::EmptyGraph);
    }
    Ok(g)
}

pub fn write_smiles(g: &MolGraph) -> Result<String, MolError> {
    write_smiles_with_order(g).map(|(s, _)| s)
}

fn bond_symbol(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

fn ring_label(n: u32) -> String {
    if n < 10 {
        n.to_string()
    } else {
        format!("%{n:02}")
    }
}

struct Writer<'a> {
    g: &'a MolGraph,
    adj: Vec<Vec<(usize, u8)>>,
    discovery: Vec<usize>,
    children: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    open: BTreeMap<(usize, usize), u32>,
    in_use: Vec<bool>,
    out: String,
}

impl Writer<'_> {
    fn discover(&mut self, root: usize, order: &mut Vec<usize>) {
        // iterative DFS that mirrors the recursive visiting order
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        self.discovery[root] = 0;
        order.push(root);
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if *next >= self.adj[u].len() {
                stack.pop();
                continue;
            }
            let (v, _) = self.adj[u][*next];
            *next += 1;
            if self.discovery[v] == usize::MAX {
                self.discovery[v] = order.len();
                order.push(v);
                self.parent[v] = Some(u);
                self.children[u].push(v);
                stack.push((v, 0));
            }
        }
    }

    fn is_tree_edge(&self, u: usize, v: usize) -> bool {
        self.parent[u] == Some(v) || self.parent[v] == Some(u)
    }

    fn emit(&mut self, u: usize) {
        self.out.push_str(&self.g.atoms()[u]);
        let mut closes = Vec::new();
        let mut opens = Vec::new();
        for &(v, o) in &self.adj[u] {
            if self.is_tree_edge(u, v) {
                continue;
            }
            if self.discovery[v] < self.discovery[u] {
                closes.push((self.discovery[v], v, o));
            } else {
                opens.push((self.discovery[v], v, o));
            }
        }
        closes.sort_unstable();
        opens.sort_unstable();
        for (_, v, o) in closes {
            let num = self.open.remove(&(v, u)).expect("ring opened at ancestor");
            self.in_use[num as usize] = false;
            self.out.push_str(bond_symbol(o));
            self.out.push_str(&ring_label(num));
        }
        for (_, v, _) in opens {
            let num = (1..self.in_use.len()).find(|&k| !self.in_use[k]).unwrap_or_else(|| {
                self.in_use.push(false);
                self.in_use.len() - 1
            });
            self.in_use[num] = true;
            self.open.insert((u, v), num as u32);
            self.out.push_str(&ring_label(num as u32));
        }
        let kids = self.children[u].clone();
        for (k, &c) in kids.iter().enumerate() {
            let last = k + 1 == kids.len();
            if !last {
                self.out.push('(');
            }
            let o = self.g.bond_order(u, c).expect("tree edge");
            self.out.push_str(bond_symbol(o));
            self.emit(c);
            if !last {
                self.out.push(')');
            }
        }
    }
}

/// Writes SMILES by depth-first traversal from atom 0 (ascending neighbor
/// index), numbering ring closures in the order they are opened. Also
/// returns the atom order of the string: position `k` holds the original
/// index of the `k`-th written atom.
pub fn write_smiles_with_order(g: &MolGraph) -> Result<(String, Vec<usize>), MolError> {
    if g.is_empty() {
        return Err(MolError::EmptyGraph);
    }
    if !g.is_connected() {
        return Err(MolError::DisconnectedGraph);
    }
    let n = g.num_atoms();
    let mut w = Writer {
        g,
        adj: g.adjacency(),
        discovery: vec![usize::MAX; n],
        children: vec![Vec::new(); n],
        parent: vec![None; n],
        open: BTreeMap::new(),
        in_use: vec![true],
        out: String::new(),
    };
    let mut order = Vec::with_capacity(n);
    w.discover(0, &mut order);
    w.emit(0);
    Ok((w.out, order))
}
