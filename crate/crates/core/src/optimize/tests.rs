use super::*;
use crate::model::Config;
use crate::molgraph::{parse_dataset, parse_smiles, ElementTable};
use crate::numerics::fd_gradient;
use crate::numerics::Tensor;

fn tiny() -> Config {
    let mut c = Config::toy();
    c.n = 8;
    c.atom.coarsen = vec![2];
    c.bond.blocks = 2;
    c.bond.hidden = 4;
    c.atom.gcn_hidden = 4;
    c.atom.mlp_hidden = 4;
    c
}

fn perturbed(seed: u64) -> FlowModel {
    let mut m = FlowModel::new(tiny()).unwrap();
    let mut rng = FlowRng::new(seed);
    for id in m.params.ids().collect::<Vec<_>>() {
        if m.params.is_trainable(id) {
            let v = m.params.get(id).map(|x| x + 0.1 * rng.normal());
            m.params.set(id, v);
        }
    }
    m
}

fn molecules() -> Vec<MolGraph> {
    parse_dataset(
        "CCO\nC=CN\nC1CC1\nCC(C)O\nN#CC\nOCCO\nCCCC\nC1CCO1\nC\nCC=O\nCCCCCC\nNCCN\nOC1CC1\nCCN(C)C\n",
        &ElementTable::organic_small(),
    )
    .unwrap()
}

fn g(s: &str) -> MolGraph {
    parse_smiles(s, &ElementTable::organic_small()).unwrap()
}

#[test]
fn builtin_scorers() {
    let s = |name: &str, smi: &str| (scorer(name).unwrap().score)(&g(smi));
    assert_eq!(s("atom_count", "CC(C)O"), 4.0);
    assert_eq!(s("carbon_count", "CC(C)O"), 3.0);
    assert_eq!(s("ring_count", "CCO"), 0.0);
    assert_eq!(s("ring_count", "C1CC1"), 1.0);
    assert_eq!(s("ring_count", "C12CCCCC1CCCC2"), 2.0);
    assert!((s("heteroatom_fraction", "CCO") - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(scorer("qed"), Err(Error::UnknownScorer(_))));
}

#[test]
fn constant_target_is_fit_exactly() {
    let m = perturbed(1);
    let constant = PropertyScorer { name: "seven", score: |_| 7.0 };
    let fit = fit_surrogate(&m, &molecules(), constant, 5, 3, 1).unwrap();
    assert!(fit.mse.iter().all(|&e| e < 1e-6), "{:?}", fit.mse);
}

#[test]
fn training_error_does_not_increase() {
    let m = perturbed(2);
    let fit = fit_surrogate(&m, &molecules(), scorer("carbon_count").unwrap(), 5, 3, 1).unwrap();
    assert_eq!(fit.mse.len(), 6);
    for w in fit.mse.windows(2) {
        assert!(w[1] <= w[0], "{:?}", fit.mse);
    }
}

#[test]
fn surrogate_fit_is_deterministic() {
    let m = perturbed(3);
    let sc = scorer("atom_count").unwrap();
    let a = fit_surrogate(&m, &molecules(), sc, 2, 4, 1).unwrap();
    let b = fit_surrogate(&m, &molecules(), sc, 2, 4, 2).unwrap();
    assert_eq!(a.mse, b.mse);
    let z = vec![0.3; a.surrogate.dim()];
    assert_eq!(a.surrogate.predict(&z).unwrap().to_bits(), b.surrogate.predict(&z).unwrap().to_bits());
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let mut rng = FlowRng::new(5);
    let mut s = Surrogate::new(6, 1.0, &mut rng);
    let out_w = s.out.w;
    s.params.set(out_w, Tensor::from_fn(&[HIDDEN_FOR_TESTS, 1], |_| rng.normal()));
    let z: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
    let analytic = s.grad(&z).unwrap();
    let fd = fd_gradient(|t| s.predict(t.data()).unwrap(), &Tensor::new(&[6], z.clone()).unwrap(), 1e-6);
    for (a, f) in analytic.iter().zip(fd.data()) {
        assert!((a - f).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {f}");
    }
    assert!(s.predict(&[0.0; 3]).is_err());
}

const HIDDEN_FOR_TESTS: usize = surrogate::HIDDEN;

fn opts(alpha: f64, delta: Option<f64>) -> LsoOptions {
    LsoOptions { alpha, steps: 4, delta, seed: 2, threads: 1 }
}

#[test]
fn zero_step_size_returns_decoded_start() {
    let m = perturbed(6);
    let sc = scorer("carbon_count").unwrap();
    let fit = fit_surrogate(&m, &molecules(), sc, 2, 1, 1).unwrap();
    let starts = molecules()[..4].to_vec();
    let res = lso(&m, &fit.surrogate, &starts, sc, &opts(0.0, None)).unwrap();
    for r in &res {
        assert_eq!(r.best_smiles, r.start_smiles);
        assert_eq!(r.improvement(), 0.0);
        assert_eq!(r.similarity, 1.0);
        assert!(!r.success);
    }
}

#[test]
fn vacuous_constraint_matches_unconstrained() {
    let m = perturbed(7);
    let sc = scorer("carbon_count").unwrap();
    let fit = fit_surrogate(&m, &molecules(), sc, 2, 1, 1).unwrap();
    let starts = molecules()[..4].to_vec();
    let free = lso(&m, &fit.surrogate, &starts, sc, &opts(0.5, None)).unwrap();
    let zero = lso(&m, &fit.surrogate, &starts, sc, &opts(0.5, Some(0.0))).unwrap();
    assert_eq!(free, zero);
}

#[test]
fn constrained_results_respect_threshold() {
    let m = perturbed(8);
    let sc = scorer("atom_count").unwrap();
    let fit = fit_surrogate(&m, &molecules(), sc, 2, 1, 1).unwrap();
    let starts = molecules();
    let res = lso(&m, &fit.surrogate, &starts, sc, &LsoOptions { alpha: 5.0, steps: 5, delta: Some(0.6), seed: 1, threads: 2 }).unwrap();
    assert!(res.iter().all(|r| r.similarity >= 0.6));
    assert_eq!(lso_tsv(&res).lines().count(), starts.len() + 1);
}

#[test]
fn negative_step_size_rejected() {
    let m = perturbed(9);
    let sc = scorer("atom_count").unwrap();
    let fit = fit_surrogate(&m, &molecules(), sc, 1, 1, 1).unwrap();
    assert!(lso(&m, &fit.surrogate, &molecules(), sc, &opts(-1.0, None)).is_err());
}
