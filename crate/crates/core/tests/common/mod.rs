#![allow(dead_code)]

use effdim_core::data::DataSource;
use effdim_core::loss::Batch;
use effdim_core::seed;
use effdim_core::{
    build_model, Dataset, LossFunction, ModelSpec, Network, ParamVector, Sample, Split, Tensor,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

/// A randomly shaped MLP with at most `max_params` parameters and a random
/// classification dataset for it.
pub fn random_problem(case: u64, max_params: usize, n: usize) -> (Network, Dataset) {
    let mut rng = seed::rng(seed::mix64(0xbeef, &[case]));
    loop {
        let d = rng.random_range(2..=5);
        let classes = rng.random_range(2..=4);
        let depth = rng.random_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=14)).collect();
        let spec = ModelSpec::mlp_with_hidden(d, hidden, classes, rng.random());
        let net = build_model(&spec).unwrap();
        if net.param_count() > max_params {
            continue;
        }
        let samples = (0..n)
            .map(|i| Sample {
                input: Tensor::vector((0..d).map(|_| rng.random_range(0.0..1.0)).collect())
                    .unwrap(),
                label: if i < classes {
                    i
                } else {
                    rng.random_range(0..classes)
                },
            })
            .collect();
        let data = Dataset::new(samples, Split::Test, classes, DataSource::External).unwrap();
        return (net, data);
    }
}

pub fn random_direction(p: usize, seed: u64) -> ParamVector {
    let mut rng = effdim_core::seed::rng(seed);
    ParamVector((0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense Hessian assembled column by column from unit-vector products.
pub fn dense_hessian(net: &Network, batch: &Batch) -> DMatrix<f64> {
    let p = net.param_count();
    let mut h = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        let col = LossFunction::CrossEntropy
            .hvp(net, batch, &ParamVector(e))
            .unwrap();
        for i in 0..p {
            h[(i, j)] = col.0[i];
        }
    }
    h
}

/// Eigenvalues of the symmetrized dense Hessian, descending.
pub fn dense_eigenvalues(h: &DMatrix<f64>) -> Vec<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Relative error of `got` against the oracle eigenvalue `want`, ignoring
/// differences below the dense solver's own resolution `dim·ε·max|λ|`.
pub fn eig_rel_err(got: f64, want: f64, oracle: &[f64]) -> f64 {
    let scale = oracle.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let floor = oracle.len() as f64 * f64::EPSILON * scale;
    let excess = ((got - want).abs() - floor).max(0.0);
    if excess == 0.0 {
        0.0
    } else {
        excess / want.abs()
    }
}
