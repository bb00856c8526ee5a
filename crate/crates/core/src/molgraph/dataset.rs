//! Dataset files: one kekulized SMILES per line, `#` comments.

use std::path::Path;

use super::{parse_smiles, ElementTable, MolError, MolGraph};

pub fn parse_dataset(text: &str, table: &ElementTable) -> Result<Vec<MolGraph>, MolError> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let g = parse_smiles(line, table).map_err(|e| MolError::Line { line: k + 1, source: Box::new(e) })?;
        out.push(g);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path, table: &ElementTable) -> Result<Vec<MolGraph>, MolError> {
    let text = std::fs::read_to_string(path).map_err(|e| MolError::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(&text, table)
}
