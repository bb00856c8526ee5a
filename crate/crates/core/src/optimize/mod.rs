//! Latent-space property optimization: circular fingerprints, property
//! scorers, a surrogate regressor on flattened latents and gradient ascent.

mod fingerprint;
pub(crate) mod surrogate;

pub use fingerprint::{fingerprint, tanimoto, Fingerprint, DEFAULT_BITS, DEFAULT_RADIUS};
pub use surrogate::{fit_surrogate, Surrogate, SurrogateFit};

use crate::error::{Error, Result};
use crate::flowcore::Ctx;
use crate::generation::{correct_or_fallback, encode_latents, map_chunks};
use crate::model::{FlowModel, STREAM_LSO};
use crate::molgraph::{canonical_smiles, MolGraph};
use crate::numerics::{FlowRng, Tape};

/// A named molecular property.
#[derive(Clone, Copy)]
pub struct PropertyScorer {
    pub name: &'static str,
    pub score: fn(&MolGraph) -> f64,
}

impl std::fmt::Debug for PropertyScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

fn atom_count(g: &MolGraph) -> f64 {
    g.num_atoms() as f64
}

fn carbon_count(g: &MolGraph) -> f64 {
    g.atoms().iter().filter(|a| *a == "C").count() as f64
}

/// Independent cycles: bonds - atoms + components.
fn ring_count(g: &MolGraph) -> f64 {
    (g.num_bonds() + g.components().len()) as f64 - g.num_atoms() as f64
}

fn heteroatom_fraction(g: &MolGraph) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.atoms().iter().filter(|a| *a != "C").count() as f64 / g.num_atoms() as f64
}

pub const SCORERS: [PropertyScorer; 4] = [
    PropertyScorer { name: "atom_count", score: atom_count },
    PropertyScorer { name: "carbon_count", score: carbon_count },
    PropertyScorer { name: "ring_count", score: ring_count },
    PropertyScorer { name: "heteroatom_fraction", score: heteroatom_fraction },
];

pub fn scorer(name: &str) -> Result<PropertyScorer> {
    SCORERS.iter().copied().find(|s| s.name == name).ok_or_else(|| Error::UnknownScorer(name.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsoResult {
    pub start_smiles: String,
    pub best_smiles: String,
    pub score_before: f64,
    pub score_after: f64,
    pub similarity: f64,
    pub success: bool,
}

impl LsoResult {
    pub fn improvement(&self) -> f64 {
        self.score_after - self.score_before
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LsoOptions {
    pub alpha: f64,
    pub steps: usize,
    /// Minimum Tanimoto similarity to the start molecule.
    pub delta: Option<f64>,
    pub seed: u64,
    pub threads: usize,
}

/// Gradient ascent on the surrogate from each start's latents. Every step
/// is decoded and corrected; the best feasible candidate, the decoded start
/// included, is reported.
pub fn lso(model: &FlowModel, surrogate: &Surrogate, starts: &[MolGraph], scorer: PropertyScorer, opts: &LsoOptions) -> Result<Vec<LsoResult>> {
    if !(opts.alpha >= 0.0 && opts.alpha.is_finite()) {
        return Err(Error::Invalid(format!("step size {} must be non-negative", opts.alpha)));
    }
    let z0 = encode_latents(model, starts, FlowRng::new(opts.seed).split(STREAM_LSO), opts.threads)?;
    map_chunks(starts.len(), 1, opts.threads, |i, _| {
        let start = &starts[i];
        let start_fp = fingerprint(start, DEFAULT_RADIUS, DEFAULT_BITS)?;
        let template = z0.select(i);
        let mut z = template.flat(0);
        let mut best: Option<(f64, f64, MolGraph)> = None;
        for step in 0..=opts.steps {
            if step > 0 {
                let g = surrogate.grad(&z)?;
                for (v, d) in z.iter_mut().zip(&g) {
                    *v += opts.alpha * d;
                }
            }
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.params);
            let d = model.decode_latents(&ctx, &template.from_flat_like(&z)?)?;
            let raw = d.graph(0, model);
            let cand = correct_or_fallback(&raw, &d.x.index0(0).data()[..model.config.d_pad], model)?;
            let sim = tanimoto(&fingerprint(&cand, DEFAULT_RADIUS, DEFAULT_BITS)?, &start_fp)?;
            if opts.delta.is_some_and(|delta| sim < delta) {
                continue;
            }
            let score = (scorer.score)(&cand);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, sim, cand));
            }
        }
        let before = (scorer.score)(start);
        let start_smiles = canonical_smiles(start)?;
        let result = match best {
            Some((score, sim, g)) => LsoResult {
                start_smiles,
                best_smiles: canonical_smiles(&g)?,
                score_before: before,
                score_after: score,
                similarity: sim,
                success: score > before,
            },
            None => LsoResult {
                best_smiles: start_smiles.clone(),
                start_smiles,
                score_before: before,
                score_after: before,
                similarity: 1.0,
                success: false,
            },
        };
        Ok(vec![result])
    })
}

/// `start_smiles, best_smiles, score_before, score_after, similarity,
/// success` with a header line.
pub fn lso_tsv(results: &[LsoResult]) -> String {
    let mut out = String::from("start_smiles\tbest_smiles\tscore_before\tscore_after\tsimilarity\tsuccess\n");
    for r in results {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            r.start_smiles, r.best_smiles, r.score_before, r.score_after, r.similarity, r.success
        ));
    }
    out
}

#[cfg(test)]
mod tests;
