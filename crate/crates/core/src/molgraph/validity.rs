//! Valence checks and greedy validity correction.

use super::{ElementTable, MolError, MolGraph};

/// Connected, non-empty, and every atom within its maximum valence.
pub fn check_valence(g: &MolGraph, table: &ElementTable) -> bool {
    if g.is_empty() || !g.is_connected() {
        return false;
    }
    g.valence_sums()
        .iter()
        .zip(g.atoms())
        .all(|(&v, sym)| table.max_valence(sym).is_some_and(|m| v <= m as u32))
}

fn excess(g: &MolGraph, table: &ElementTable) -> Vec<i64> {
    g.valence_sums()
        .iter()
        .zip(g.atoms())
        .map(|(&v, sym)| v as i64 - table.max_valence(sym).unwrap_or(0) as i64)
        .collect()
}

/// Lowers bond orders one step at a time at the most over-bonded atom until
/// no atom exceeds its valence, then keeps the largest component.
pub fn correct_validity(g: &MolGraph, table: &ElementTable) -> Result<MolGraph, MolError> {
    if g.is_empty() {
        return Err(MolError::EmptyGraph);
    }
    if let Some(sym) = g.atoms().iter().find(|s| table.max_valence(s).is_none()) {
        return Err(MolError::UnknownElement(sym.clone()));
    }
    let mut g = g.clone();
    loop {
        let ex = excess(&g, table);
        let Some((atom, &worst)) = ex.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) else {
            break;
        };
        if worst <= 0 {
            break;
        }
        let (nbr, order) = g
            .neighbors(atom)
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("over-bonded atom has bonds");
        g.set_bond_order(atom, nbr, order - 1);
    }
    let comps = g.components();
    let best = comps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
        .map(|(_, c)| c.clone())
        .expect("non-empty graph");
    Ok(g.induced(&best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{parse_smiles, write_smiles};

    fn t() -> ElementTable {
        ElementTable::zinc()
    }

    #[test]
    fn valence_examples() {
        assert!(check_valence(&parse_smiles("C=O", &t()).unwrap(), &t()));
        assert!(!check_valence(&parse_smiles("O=O=O", &t()).unwrap(), &t()));
        assert!(check_valence(&parse_smiles("C", &t()).unwrap(), &t()));
        assert!(!check_valence(&MolGraph::new(), &t()));
        assert!(!check_valence(&MolGraph::from_parts(&["C", "C"], &[]).unwrap(), &t()));
    }

    #[test]
    fn ozone_trace() {
        // central O starts at valence 4: (0,1) drops to single first, then (1,2)
        let g = parse_smiles("O=O=O", &t()).unwrap();
        let c = correct_validity(&g, &t()).unwrap();
        assert_eq!(c.atoms(), &["O", "O", "O"]);
        let bonds: Vec<_> = c.bonds().map(|b| (b.i, b.j, b.order)).collect();
        assert_eq!(bonds, vec![(0, 1, 1), (1, 2, 1)]);
        assert!(check_valence(&c, &t()));
    }

    #[test]
    fn valid_graph_unchanged() {
        let g = parse_smiles("CC(=O)N", &t()).unwrap();
        assert_eq!(correct_validity(&g, &t()).unwrap(), g);
    }

    #[test]
    fn pentavalent_nitrogen() {
        let g = parse_smiles("N(C)(C)(C)C", &t()).unwrap();
        let c = correct_validity(&g, &t()).unwrap();
        assert_eq!(c.atoms(), &["N", "C", "C", "C"]);
        assert_eq!(write_smiles(&c).unwrap(), "N(C)(C)C");
    }

    #[test]
    fn largest_component_tie_keeps_lowest_index() {
        let g = MolGraph::from_parts(&["C", "C", "O", "O"], &[(0, 1, 1), (2, 3, 1)]).unwrap();
        let c = correct_validity(&g, &t()).unwrap();
        assert_eq!(c.atoms(), &["C", "C"]);
    }

    #[test]
    fn empty_graph_rejected() {
        assert_eq!(correct_validity(&MolGraph::new(), &t()), Err(MolError::EmptyGraph));
    }
}
