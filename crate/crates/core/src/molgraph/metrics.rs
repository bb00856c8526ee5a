//! Canonical strings and generation metrics.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{bfs_order, check_valence, correct_validity, write_smiles, ElementTable, MolError, MolGraph};

/// SMILES of the BFS-reordered graph. Only defined for connected graphs.
pub fn canonical_smiles(g: &MolGraph) -> Result<String, MolError> {
    write_smiles(&g.permuted(&bfs_order(g)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GenMetrics {
    pub validity: f64,
    pub validity_wo_correction: f64,
    pub validity_w_filter: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub reconstruction: f64,
}

/// Metrics over raw decoded graphs.
///
/// `validity` counts graphs that pass the valence check after correction and
/// `validity_wo_correction` those that pass before it. `validity_w_filter`
/// counts uncorrected valid graphs with more than `size_threshold` atoms.
/// Uniqueness and novelty are fractions of the corrected valid set.
/// `recon` is `(ok, total)`; a zero total gives 0.
pub fn compute_metrics(
    generated: &[MolGraph],
    table: &ElementTable,
    train_set: &HashSet<String>,
    recon: (usize, usize),
    size_threshold: usize,
) -> Result<GenMetrics, MolError> {
    if generated.is_empty() {
        return Err(MolError::EmptyBatch);
    }
    let total = generated.len() as f64;
    let mut valid = Vec::new();
    let (mut raw_valid, mut filtered) = (0usize, 0usize);
    for g in generated {
        if check_valence(g, table) {
            raw_valid += 1;
            if g.num_atoms() > size_threshold {
                filtered += 1;
            }
        }
        if let Ok(c) = correct_validity(g, table) {
            if check_valence(&c, table) {
                valid.push(canonical_smiles(&c)?);
            }
        }
    }
    let frac = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
    let unique: HashSet<&String> = valid.iter().collect();
    let novel = valid.iter().filter(|s| !train_set.contains(*s)).count();
    Ok(GenMetrics {
        validity: valid.len() as f64 / total,
        validity_wo_correction: raw_valid as f64 / total,
        validity_w_filter: filtered as f64 / total,
        uniqueness: frac(unique.len(), valid.len()),
        novelty: frac(novel, valid.len()),
        reconstruction: frac(recon.0, recon.1),
    })
}
