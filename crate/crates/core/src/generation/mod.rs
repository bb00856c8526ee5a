//! Sampling, reconstruction, hierarchical resampling and substructure
//! counts.

mod par;

pub(crate) use par::map_chunks;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flowcore::Ctx;
use crate::model::{stack_encoded, FlowModel, LatentPack, STREAM_RECON, STREAM_RESAMPLE, STREAM_SAMPLE};
use crate::molgraph::{
    bfs_order, canonical_smiles, check_valence, correct_validity, GenMetrics, MolError, MolGraph,
};
use crate::numerics::{FlowRng, Tape, Tensor};
use crate::training::dequantize;

/// Samples decoded per tape.
const CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub struct SampleReport {
    pub raw: Vec<MolGraph>,
    pub corrected: Vec<MolGraph>,
    pub canonical: Vec<String>,
    pub metrics: GenMetrics,
    pub seed: u64,
    pub temperature: f64,
}

impl SampleReport {
    /// `index, smiles_raw_or_INVALID, smiles_corrected, n_atoms,
    /// valid_uncorrected` with a header line.
    pub fn to_tsv(&self, elements: &crate::molgraph::ElementTable) -> String {
        let mut out = String::from("index\tsmiles_raw_or_INVALID\tsmiles_corrected\tn_atoms\tvalid_uncorrected\n");
        for (i, (raw, canon)) in self.raw.iter().zip(&self.canonical).enumerate() {
            let valid = check_valence(raw, elements);
            let raw_s = if valid { canonical_smiles(raw).unwrap_or_else(|_| "INVALID".into()) } else { "INVALID".into() };
            out.push_str(&format!("{i}\t{raw_s}\t{canon}\t{}\t{valid}\n", self.corrected[i].num_atoms()));
        }
        out
    }
}

pub fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t <= 2.0 {
        Ok(())
    } else {
        Err(Error::BadTemperature(t))
    }
}

/// Corrected graph of a raw decode. A decode without real atoms becomes the
/// single element scored highest in the first atom row.
pub fn correct_or_fallback(raw: &MolGraph, x_row0: &[f64], model: &FlowModel) -> Result<MolGraph> {
    let table = &model.config.elements;
    if raw.is_empty() {
        let mut best = 0;
        for c in 1..table.len() {
            if x_row0[c] > x_row0[best] {
                best = c;
            }
        }
        let mut g = MolGraph::new();
        g.add_atom(table.symbol(best).expect("element channel"));
        return Ok(g);
    }
    Ok(correct_validity(raw, table)?)
}

/// Metrics from raw and corrected graphs; reconstruction is left at 0.
pub fn metrics_of(raw: &[MolGraph], corrected: &[MolGraph], model: &FlowModel, train_set: &HashSet<String>) -> Result<GenMetrics> {
    if raw.is_empty() {
        return Err(MolError::EmptyBatch.into());
    }
    let table = &model.config.elements;
    let total = raw.len() as f64;
    let raw_valid: Vec<&MolGraph> = raw.iter().filter(|g| check_valence(g, table)).collect();
    let filtered = raw_valid.iter().filter(|g| g.num_atoms() > model.config.size_filter).count();
    let valid: Vec<String> =
        corrected.iter().filter(|g| check_valence(g, table)).map(canonical_smiles).collect::<std::result::Result<_, _>>()?;
    let unique: HashSet<&String> = valid.iter().collect();
    let novel = valid.iter().filter(|s| !train_set.contains(*s)).count();
    let frac = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
    Ok(GenMetrics {
        validity: valid.len() as f64 / total,
        validity_wo_correction: raw_valid.len() as f64 / total,
        validity_w_filter: filtered as f64 / total,
        uniqueness: frac(unique.len(), valid.len()),
        novelty: frac(novel, valid.len()),
        reconstruction: 0.0,
    })
}

fn sample_rng(seed: u64, i: usize) -> FlowRng {
    FlowRng::new(seed).split(STREAM_SAMPLE).split(i as u64)
}

/// Draws `count` molecules at temperature `t`. Sample `i` uses its own
/// stream of `seed`, so the result does not depend on `threads`.
pub fn sample(model: &FlowModel, count: usize, t: f64, seed: u64, threads: usize, train_set: &HashSet<String>) -> Result<SampleReport> {
    check_temperature(t)?;
    if count == 0 {
        return Err(MolError::EmptyBatch.into());
    }
    let pairs = map_chunks(count, CHUNK, threads, |lo, hi| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params);
        let mut rngs: Vec<FlowRng> = (lo..hi).map(|i| sample_rng(seed, i)).collect();
        let nb = vec![None; model.bond_levels()];
        let na = vec![None; model.atom_levels()];
        let d = model.decode(&ctx, hi - lo, &nb, &na, t, &mut rngs)?;
        (0..hi - lo)
            .map(|b| {
                let raw = d.graph(b, model);
                let x = d.x.index0(b);
                let fixed = correct_or_fallback(&raw, &x.data()[..model.config.d_pad], model)?;
                Ok((raw, fixed))
            })
            .collect()
    })?;
    let (raw, corrected): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let canonical = corrected.iter().map(canonical_smiles).collect::<std::result::Result<_, _>>()?;
    let metrics = metrics_of(&raw, &corrected, model, train_set)?;
    Ok(SampleReport { raw, corrected, canonical, metrics, seed, temperature: t })
}

/// Latents of `graphs` under a fixed dequantization stream per molecule.
pub fn encode_latents(model: &FlowModel, graphs: &[MolGraph], stream: FlowRng, threads: usize) -> Result<LatentPack> {
    if graphs.is_empty() {
        return Err(MolError::EmptyBatch.into());
    }
    let parts = map_chunks(graphs.len(), CHUNK, threads, |lo, hi| {
        let encs = graphs[lo..hi].iter().map(|g| model.encode_graph(g)).collect::<Result<Vec<_>>>()?;
        let mut xs = Vec::new();
        let mut as_ = Vec::new();
        for (k, e) in encs.iter().enumerate() {
            let mut rng = stream.split((lo + k) as u64);
            let (x, a) = dequantize(e, model.config.noise_scale, &mut rng)?;
            xs.push(x);
            as_.push(a);
        }
        let onehot = stack_encoded(&encs.iter().collect::<Vec<_>>())?.1;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params);
        let z = model.encode(&ctx, tape.constant(Tensor::stack(&xs)?)?, tape.constant(Tensor::stack(&as_)?)?, &onehot)?;
        Ok((0..hi - lo).map(|b| z.select(b)).collect())
    })?;
    LatentPack::concat(&parts)
}

/// Decodes a full latent batch into raw graphs.
pub fn decode_batch(model: &FlowModel, z: &LatentPack, threads: usize) -> Result<Vec<MolGraph>> {
    map_chunks(z.batch(), CHUNK, threads, |lo, hi| {
        let part = LatentPack::concat(&(lo..hi).map(|i| z.select(i)).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params);
        let d = model.decode_latents(&ctx, &part)?;
        Ok((0..hi - lo).map(|b| d.graph(b, model)).collect())
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconReport {
    pub ok: usize,
    pub total: usize,
}

impl ReconReport {
    pub fn fraction(&self) -> f64 {
        self.ok as f64 / self.total as f64
    }
}

/// Encodes, dequantizes, maps to latents and back, and compares canonical
/// strings. `latent_shift` is added to every latent before decoding.
pub fn reconstruct_shifted(model: &FlowModel, graphs: &[MolGraph], seed: u64, threads: usize, latent_shift: f64) -> Result<ReconReport> {
    let mut z = encode_latents(model, graphs, FlowRng::new(seed).split(STREAM_RECON), threads)?;
    if latent_shift != 0.0 {
        for level in z.bond.iter_mut().chain(z.atom.iter_mut()) {
            *level = level.map(|v| v + latent_shift);
        }
    }
    let back = decode_batch(model, &z, threads)?;
    let ok = graphs
        .iter()
        .zip(&back)
        .filter(|(g, b)| match (canonical_smiles(g), canonical_smiles(b)) {
            (Ok(x), Ok(y)) => x == y,
            _ => false,
        })
        .count();
    Ok(ReconReport { ok, total: graphs.len() })
}

pub fn reconstruct(model: &FlowModel, graphs: &[MolGraph], seed: u64, threads: usize) -> Result<ReconReport> {
    reconstruct_shifted(model, graphs, seed, threads, 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleRow {
    /// Coarsest redrawn atom level; `None` for the unchanged latents.
    pub level: Option<usize>,
    pub sample: usize,
    pub smiles: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleGrid {
    pub original: String,
    pub rows: Vec<ResampleRow>,
}

impl ResampleGrid {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("level_j\tsample_idx\tsmiles\n");
        for r in &self.rows {
            let level = r.level.map_or("none".to_string(), |j| j.to_string());
            out.push_str(&format!("{level}\t{}\t{}\n", r.sample, r.smiles));
        }
        out
    }
}

/// Encodes `g`, then for each atom level `j` redraws atom levels `0..=j`
/// and bond levels `0..=j` at temperature `t`, keeping the rest fixed.
pub fn resample_hierarchy(model: &FlowModel, g: &MolGraph, per_level: usize, t: f64, seed: u64, threads: usize) -> Result<ResampleGrid> {
    check_temperature(t)?;
    let base = FlowRng::new(seed).split(STREAM_RESAMPLE);
    let z = encode_latents(model, std::slice::from_ref(g), base.split(u64::MAX), 1)?;
    let mut rows = Vec::new();
    let decode_one = |bond: Vec<Option<Tensor>>, atom: Vec<Option<Tensor>>, rng: FlowRng| -> Result<String> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params);
        let d = model.decode(&ctx, 1, &bond, &atom, t, &mut [rng])?;
        let raw = d.graph(0, model);
        let fixed = correct_or_fallback(&raw, &d.x.index0(0).data()[..model.config.d_pad], model)?;
        Ok(canonical_smiles(&fixed)?)
    };
    let keep = |v: &[Tensor], redraw: usize| -> Vec<Option<Tensor>> {
        v.iter().enumerate().map(|(i, z)| if i < redraw { None } else { Some(z.clone()) }).collect()
    };
    let original = decode_one(keep(&z.bond, 0), keep(&z.atom, 0), base.clone())?;
    rows.push(ResampleRow { level: None, sample: 0, smiles: original.clone() });
    for j in 0..model.atom_levels() {
        let level_rng = base.split(j as u64);
        let smiles = map_chunks(per_level, 1, threads, |s, _| {
            Ok(vec![decode_one(keep(&z.bond, j + 1), keep(&z.atom, j + 1), level_rng.split(s as u64))?])
        })?;
        rows.extend(smiles.into_iter().enumerate().map(|(s, smiles)| ResampleRow { level: Some(j), sample: s, smiles }));
    }
    Ok(ResampleGrid { original, rows })
}

/// Counts the fragments of consecutive `k`-atom clusters of BFS-ordered
/// samples. Clusters that fall apart are counted per component. Sorted by
/// count, then fragment.
pub fn substructure_stats(samples: &[MolGraph], k: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for g in samples {
        let g = g.permuted(&bfs_order(g));
        for c in 0..g.num_atoms() / k.max(1) {
            let keep: Vec<usize> = (c * k..(c + 1) * k).collect();
            let frag = g.induced(&keep);
            for comp in frag.components() {
                let piece = frag.induced(&comp);
                if let Ok(s) = canonical_smiles(&piece) {
                    *counts.entry(s).or_default() += 1;
                }
            }
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
