//! Hessian eigenspectrum estimation and effective dimensionality.
//!
//! The Hessian is never materialized. [`lanczos_eigs`] only needs a
//! matrix-vector callback, which [`hessian_spectrum`] supplies as exact
//! Hessian-vector products of the mean test loss.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::LossFunction;
use crate::model::{Network, ParamVector};
use crate::seed;

pub const DEFAULT_Z: f64 = 1.0;
pub const DEFAULT_K: usize = 100;
pub const DEFAULT_SUBSET: usize = 1000;
/// Regularization constants reported alongside the primary `z`.
pub const Z_SWEEP: [f64; 3] = [0.1, 1.0, 10.0];

const BREAKDOWN_TOL: f64 = 1e-12;

/// Ritz values of a symmetric operator, sorted descending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub k: usize,
    pub neg_mass_fraction: f64,
    pub hvp_data_size: usize,
    pub seed: u64,
    /// Lanczos hit an invariant subspace and restarted from a fresh vector.
    pub breakdown: bool,
}

impl Spectrum {
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>, seed: u64) -> Self {
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let neg_mass_fraction = negative_mass_fraction(&eigenvalues);
        Self {
            k: eigenvalues.len(),
            eigenvalues,
            neg_mass_fraction,
            hvp_data_size: 0,
            seed,
            breakdown: false,
        }
    }

    /// Worst-case contribution of the unresolved tail, `k·λ_k/(λ_k+z)`.
    pub fn tail_bound(&self, z: f64) -> f64 {
        match self.eigenvalues.last() {
            Some(&l) => {
                let l = l.max(0.0);
                self.eigenvalues.len() as f64 * l / (l + z)
            }
            None => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffDimConfig {
    pub z: f64,
    /// Lanczos steps; `None` means `min(100, P)`.
    #[serde(default)]
    pub k: Option<usize>,
    /// Test samples in the fixed Hessian subset.
    #[serde(default = "default_subset")]
    pub subset_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_subset() -> usize {
    DEFAULT_SUBSET
}

impl Default for EffDimConfig {
    fn default() -> Self {
        Self {
            z: DEFAULT_Z,
            k: None,
            subset_size: DEFAULT_SUBSET,
            seed: 0,
        }
    }
}

impl EffDimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z > 0.0 && self.z.is_finite()) {
            return Err(Error::invalid("z must be positive"));
        }
        if self.k == Some(0) || self.subset_size == 0 {
            return Err(Error::invalid("k and subset_size must be positive"));
        }
        Ok(())
    }

    pub fn steps_for(&self, param_count: usize) -> usize {
        self.k.unwrap_or(DEFAULT_K).min(param_count)
    }
}

pub fn negative_mass_fraction(eigenvalues: &[f64]) -> f64 {
    let total: f64 = eigenvalues.iter().map(|l| l.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    eigenvalues.iter().map(|l| (-l).max(0.0)).sum::<f64>() / total
}

/// `Σ max(λ,0) / (max(λ,0) + z)`.
pub fn n_eff(eigenvalues: &[f64], z: f64) -> f64 {
    eigenvalues
        .iter()
        .map(|&l| {
            let l = l.max(0.0);
            l / (l + z)
        })
        .sum()
}

pub fn effective_dimensionality(spectrum: &Spectrum, z: f64) -> f64 {
    n_eff(&spectrum.eigenvalues, z)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `k`-step Lanczos with full (two-pass) reorthogonalization from a seeded
/// random unit start vector. When the Krylov space becomes invariant the
/// iteration restarts from a fresh random vector orthogonal to the basis, so
/// repeated eigenvalues come back with their multiplicity; `breakdown` records
/// that this happened.
pub fn lanczos_eigs<F>(mut op: F, dim: usize, k: usize, seed: u64) -> Result<Spectrum>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if k == 0 || k > dim {
        return Err(Error::invalid(format!(
            "need 0 < k <= dim, got k={k}, dim={dim}"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut q = random_unit(dim, &mut rng);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut alpha = Vec::with_capacity(k);
    let mut beta: Vec<f64> = Vec::with_capacity(k);
    let mut scale = 0.0_f64;
    let mut breakdown = false;

    for j in 0..k {
        let mut w = op(&q)?;
        if w.len() != dim {
            return Err(Error::invalid(
                "operator returned a vector of the wrong length",
            ));
        }
        let a = dot(&q, &w);
        axpy(&mut w, -a, &q);
        if let (Some(prev), Some(&b)) = (basis.last(), beta.last()) {
            axpy(&mut w, -b, prev);
        }
        basis.push(q);
        alpha.push(a);
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &w);
                axpy(&mut w, -c, v);
            }
        }
        scale = scale.max(a.abs());
        if j + 1 == k {
            break;
        }
        let b = dot(&w, &w).sqrt();
        scale = scale.max(b);
        if b < BREAKDOWN_TOL * scale.max(1.0) {
            breakdown = true;
            match fresh_direction(&basis, dim, &mut rng) {
                Some(fresh) => {
                    beta.push(0.0);
                    q = fresh;
                    continue;
                }
                None => break,
            }
        }
        beta.push(b);
        q = w.into_iter().map(|v| v / b).collect();
    }

    let eigenvalues = tridiagonal_eigenvalues(&alpha, &beta)?;
    let mut s = Spectrum::from_eigenvalues(eigenvalues, seed);
    s.breakdown = breakdown;
    Ok(s)
}

fn random_unit(dim: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut q: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let nq = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|v| *v /= nq);
    q
}

/// A random unit vector orthogonal to `basis`, or `None` once the basis spans
/// the space numerically.
fn fresh_direction(basis: &[Vec<f64>], dim: usize, rng: &mut impl rand::Rng) -> Option<Vec<f64>> {
    for _ in 0..3 {
        let mut q = random_unit(dim, rng);
        for _ in 0..2 {
            for v in basis {
                let c = dot(v, &q);
                axpy(&mut q, -c, v);
            }
        }
        let n = dot(&q, &q).sqrt();
        if n > 1e-8 {
            q.iter_mut().for_each(|v| *v /= n);
            return Some(q);
        }
    }
    None
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `diag` and
/// off-diagonal `off` (`off.len() == diag.len() - 1`), by implicit QL with
/// Wilkinson shifts.
pub fn tridiagonal_eigenvalues(diag: &[f64], off: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    assert_eq!(off.len() + 1, n, "off-diagonal must have n-1 entries");
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 100 {
                return Err(Error::invalid("tridiagonal QL failed to converge"));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(d)
}

/// Top-`k` Hessian spectrum of the mean test loss over a fixed,
/// seed-selected subset of the test set.
pub fn hessian_spectrum(
    network: &Network,
    test: &Dataset,
    loss: &LossFunction,
    config: &EffDimConfig,
) -> Result<Spectrum> {
    config.validate()?;
    let subset = test.subset(config.subset_size, seed::mix64(config.seed, &[0x5eb5e7]));
    let batch = subset.to_batch();
    let p = network.param_count();
    let k = config.steps_for(p);
    let mut spectrum = lanczos_eigs(
        |v| {
            loss.hvp(network, &batch, &ParamVector(v.to_vec()))
                .map(|hv| hv.0)
        },
        p,
        k,
        config.seed,
    )?;
    spectrum.hvp_data_size = batch.len();
    Ok(spectrum)
}

/// Metadata written next to a spectrum CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSidecar {
    pub k: usize,
    pub z: f64,
    pub eff_dim: f64,
    pub eff_dim_z_sweep: Vec<(f64, f64)>,
    pub tail_bound: f64,
    pub neg_mass_fraction: f64,
    pub hvp_data_size: usize,
    pub seed: u64,
    pub breakdown: bool,
    pub param_count: usize,
}

impl SpectrumSidecar {
    pub fn new(spectrum: &Spectrum, z: f64, param_count: usize) -> Self {
        Self {
            k: spectrum.k,
            z,
            eff_dim: effective_dimensionality(spectrum, z),
            eff_dim_z_sweep: Z_SWEEP
                .iter()
                .map(|&zz| (zz, effective_dimensionality(spectrum, zz)))
                .collect(),
            tail_bound: spectrum.tail_bound(z),
            neg_mass_fraction: spectrum.neg_mass_fraction,
            hvp_data_size: spectrum.hvp_data_size,
            seed: spectrum.seed,
            breakdown: spectrum.breakdown,
            param_count,
        }
    }
}

/// `rank,eigenvalue` CSV, rank starting at 1.
pub fn spectrum_csv(spectrum: &Spectrum) -> String {
    let mut out = String::from("rank,eigenvalue\n");
    for (i, l) in spectrum.eigenvalues.iter().enumerate() {
        out.push_str(&format!("{},{:?}\n", i + 1, l));
    }
    out
}

pub fn parse_spectrum_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("rank,eigenvalue") => {}
        _ => {
            return Err(Error::Schema {
                column: "rank".into(),
                reason: "expected header `rank,eigenvalue`".into(),
            })
        }
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (_, v) = l.split_once(',').ok_or_else(|| Error::Schema {
                column: "eigenvalue".into(),
                reason: format!("malformed row `{l}`"),
            })?;
            v.parse::<f64>().map_err(|e| Error::Schema {
                column: "eigenvalue".into(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_spectrum(
    dir: &Path,
    stem: &str,
    spectrum: &Spectrum,
    sidecar: &SpectrumSidecar,
) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, spectrum_csv(spectrum)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let mut f = std::fs::File::create(&json).map_err(|e| Error::io(&json, e))?;
    serde_json::to_writer_pretty(&mut f, sidecar)?;
    f.write_all(b"\n").map_err(|e| Error::io(&json, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_op(d: Vec<f64>) -> impl FnMut(&[f64]) -> Result<Vec<f64>> {
        move |v| Ok(v.iter().zip(&d).map(|(a, b)| a * b).collect())
    }

    #[test]
    fn diagonal_operator_exact() {
        let s = lanczos_eigs(diag_op(vec![5.0, 4.0, 3.0, 2.0, 1.0]), 5, 5, 3).unwrap();
        for (got, want) in s.eigenvalues.iter().zip([5.0, 4.0, 3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        assert!(!s.breakdown);
    }

    #[test]
    fn identity_restarts_and_keeps_multiplicity() {
        let s = lanczos_eigs(|v: &[f64]| Ok(v.to_vec()), 10, 6, 1).unwrap();
        assert!(s.breakdown);
        assert_eq!(s.eigenvalues.len(), 6);
        assert!(s.eigenvalues.iter().all(|l| (l - 1.0).abs() < 1e-14));
    }

    #[test]
    fn repeated_eigenvalues_are_all_found() {
        let d = vec![3.0, 3.0, 1.0, 0.0, 0.0, 0.0];
        let s = lanczos_eigs(diag_op(d.clone()), 6, 6, 9).unwrap();
        for (got, want) in s.eigenvalues.iter().zip(&d) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn rejects_k_above_dim() {
        assert!(lanczos_eigs(diag_op(vec![1.0; 3]), 3, 4, 0).is_err());
    }

    #[test]
    fn effdim_examples() {
        assert_eq!(n_eff(&[0.0, 0.0, 0.0], 1.0), 0.0);
        assert_eq!(n_eff(&[1.0, 1.0, 1.0], 1.0), 1.5);
        assert_eq!(n_eff(&[10.0, 1.0, 0.1], 1.0), 1.5);
        assert_eq!(n_eff(&[-1.0, -2.0], 1.0), 0.0);
    }

    #[test]
    fn tail_bound_and_negative_mass() {
        let s = Spectrum::from_eigenvalues(vec![-1.0, 3.0, 1.0], 0);
        assert_eq!(s.eigenvalues, vec![3.0, 1.0, -1.0]);
        assert_eq!(s.neg_mass_fraction, 0.2);
        assert_eq!(s.tail_bound(1.0), 0.0);
        let s = Spectrum::from_eigenvalues(vec![4.0, 1.0], 0);
        assert_eq!(s.tail_bound(1.0), 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let s = Spectrum::from_eigenvalues(vec![1.0 / 3.0, -2.5e-17, 7.0], 0);
        let back = parse_spectrum_csv(&spectrum_csv(&s)).unwrap();
        assert_eq!(back, s.eigenvalues);
        assert!(parse_spectrum_csv("a,b\n").is_err());
    }

    #[test]
    fn ql_on_small_tridiagonal() {
        // [[2,1],[1,2]] → {3, 1}
        let mut e = tridiagonal_eigenvalues(&[2.0, 2.0], &[1.0]).unwrap();
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
        assert_eq!(tridiagonal_eigenvalues(&[4.0], &[]).unwrap(), vec![4.0]);
    }
}
