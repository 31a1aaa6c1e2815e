//! Shared fixtures and oracle checks for the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use glmm_homogeneity::covparam::{build_blocks, w_matrix_q2, BlockCoefficients, GammaPoint, WMatrix};
use glmm_homogeneity::data::{Cluster, Observation};
use glmm_homogeneity::expfam::{central_moments, moment_oracle, oracle_score_means, MomentSet};
use glmm_homogeneity::nullfit::fit_null_weighted;
use glmm_homogeneity::{fit_null, Dataset, FamilySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn families() -> Vec<FamilySpec> {
    vec![
        FamilySpec::gaussian(),
        FamilySpec::bernoulli(),
        FamilySpec::binomial(5).unwrap(),
    ]
}

/// Clustered data with `x = (1, x1)`, `z = (1, z1)` and a response drawn
/// from `family` at `η = 0.3 + 0.5 x1`.
pub fn random_dataset(rng: &mut ChaCha8Rng, family: FamilySpec, sizes: &[usize]) -> Dataset {
    let clusters = sizes
        .iter()
        .enumerate()
        .map(|(c, &m)| {
            let observations = (0..m)
                .map(|_| {
                    let x1: f64 = rng.sample(StandardNormal);
                    let z1: f64 = rng.sample(StandardNormal);
                    let eta = 0.3 + 0.5 * x1;
                    let y = if family.is_discrete() {
                        let p = 1.0 / (1.0 + (-eta).exp());
                        (0..family.trials()).filter(|_| rng.random::<f64>() < p).count() as f64
                    } else {
                        eta + rng.sample::<f64, _>(StandardNormal)
                    };
                    Observation::new(y, vec![1.0, x1], vec![1.0, z1])
                })
                .collect();
            Cluster {
                id: format!("c{c}"),
                observations,
            }
        })
        .collect();
    Dataset::new(clusters).unwrap()
}

pub fn random_sizes(rng: &mut ChaCha8Rng, clusters: usize, max_m: usize) -> Vec<usize> {
    (0..clusters).map(|_| rng.random_range(1..=max_m)).collect()
}

pub fn random_gamma(rng: &mut ChaCha8Rng) -> GammaPoint {
    GammaPoint::new(rng.random_range(1e-3..=PI), rng.random_range(-0.95..=0.95))
}

pub fn random_w(rng: &mut ChaCha8Rng) -> WMatrix {
    w_matrix_q2(random_gamma(rng)).unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64, scale: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(scale)
}

/// Closed-form moments against enumeration or quadrature on the standard
/// lattice of linear predictors and dispersions.
pub fn check_moment_lattice() -> Result<usize, String> {
    let mut checked = 0;
    for fam in families() {
        let phis: &[f64] = if fam.is_discrete() { &[1.0] } else { &[0.5, 1.0, 2.0] };
        for &phi in phis {
            for eta in [-3.0, -1.0, 0.0, 1.0, 3.0] {
                let c = central_moments(fam, eta, phi);
                let o = moment_oracle(fam, eta, phi);
                let scale = c.eu2 * c.eu2;
                let pairs = |m: &MomentSet| [m.eu2, m.eu4, m.ev2, m.eu2v, m.var_u2_minus_v, m.resid_u2_minus_v];
                for (i, (a, b)) in pairs(&c).into_iter().zip(pairs(&o)).enumerate() {
                    if !rel_close(a, b, 1e-10, scale) {
                        return Err(format!(
                            "{} eta={eta} phi={phi} moment {i}: closed form {a} vs oracle {b}",
                            fam.name()
                        ));
                    }
                }
                let (eu, eo) = oracle_score_means(fam, eta, phi);
                if eu.abs() > 1e-12 || eo.abs() > 1e-12 {
                    return Err(format!(
                        "{} eta={eta} phi={phi}: E U = {eu}, E(U²−V) = {eo}",
                        fam.name()
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

/// `(T_P, T_O)` from an explicit loop over ordered pairs.
pub fn naive_raw(u: &[f64], v: &[f64], blocks: &BlockCoefficients) -> (f64, f64) {
    let (mut t_p, mut t_o) = (0.0, 0.0);
    let mut start = 0;
    for c in 0..blocks.n_clusters() {
        let m = blocks.size(c);
        for j in 0..m {
            for k in 0..m {
                let b = blocks.get(c, j, k);
                if j == k {
                    t_o += b * (u[start + j].powi(2) - v[start + j]);
                } else {
                    t_p += b * u[start + j] * u[start + k];
                }
            }
        }
        start += m;
    }
    (t_p, t_o)
}

/// `(T_P, T_O)` from the dense `N × N` matrix `B`: `T_S = UᵀBU − tr(VB)`.
pub fn dense_raw(u: &[f64], v: &[f64], blocks: &BlockCoefficients) -> (f64, f64) {
    let n = u.len();
    let mut b = nalgebra::DMatrix::zeros(n, n);
    let mut start = 0;
    for c in 0..blocks.n_clusters() {
        let m = blocks.size(c);
        for j in 0..m {
            for k in 0..m {
                b[(start + j, start + k)] = blocks.get(c, j, k);
            }
        }
        start += m;
    }
    let uv = nalgebra::DVector::from_column_slice(u);
    let quad = (uv.transpose() * &b * &uv)[(0, 0)];
    let trace_vb: f64 = (0..n).map(|k| v[k] * b[(k, k)]).sum();
    let t_o: f64 = (0..n).map(|k| b[(k, k)] * (u[k] * u[k] - v[k])).sum();
    (quad - trace_vb - t_o, t_o)
}

/// `raw_statistics` against both reference computations on `cases` random
/// instances with at most 30 observations.
pub fn check_raw_statistics(seed: u64, cases: usize) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let nc = r.random_range(2..=6);
        let sizes = random_sizes(&mut r, nc, 5);
        let n: usize = sizes.iter().sum();
        let ds = random_dataset(&mut r, FamilySpec::gaussian(), &sizes);
        let u: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(0.1..2.0)).collect();
        let blocks = build_blocks(&ds, &random_w(&mut r)).map_err(|e| e.to_string())?;
        let raw = glmm_homogeneity::scorestats::raw_statistics(&u, &v, &blocks);
        let scale: f64 = 1.0 + u.iter().map(|x| x * x).sum::<f64>() + v.iter().sum::<f64>();
        for (name, (p, o)) in [("naive", naive_raw(&u, &v, &blocks)), ("dense", dense_raw(&u, &v, &blocks))] {
            if (raw.t_p - p).abs() > 1e-10 * scale || (raw.t_o - o).abs() > 1e-10 * scale {
                return Err(format!(
                    "case {case} ({name}): ({}, {}) vs ({p}, {o})",
                    raw.t_p, raw.t_o
                ));
            }
        }
    }
    Ok(())
}

/// Influence vectors against central differences of the reweighted fit,
/// `F_K ≈ N ∂ξ̂/∂w_K`. Returns the number of fits compared.
pub fn check_influence(seed: u64, cases: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    let eps = 1e-5;
    let mut compared = 0;
    for case in 0..cases {
        let fam = families()[case % 3];
        let nc = r.random_range(2..=4);
        let sizes = random_sizes(&mut r, nc, 3);
        let ds = random_dataset(&mut r, fam, &sizes);
        let n = ds.n_obs();
        if n > 10 || n < 3 {
            continue;
        }
        // Small discrete samples can separate; those are not fits to probe.
        let Ok(fit) = fit_null(&ds, fam) else { continue };
        for k in 0..n {
            let mut fitted = Vec::new();
            for sign in [1.0, -1.0] {
                let mut w = vec![1.0; n];
                w[k] += sign * eps;
                let f = fit_null_weighted(&ds, fam, Some(&w)).map_err(|e| e.to_string())?;
                let mut xi: Vec<f64> = f.beta_hat.iter().copied().collect();
                if f.phi_information.is_some() {
                    xi.push(f.phi_hat);
                }
                fitted.push(xi);
            }
            for (i, &fk) in fit.influence[k].iter().enumerate() {
                let fd = n as f64 * (fitted[0][i] - fitted[1][i]) / (2.0 * eps);
                if (fd - fk).abs() > 1e-4 * (1.0 + fk.abs()) {
                    return Err(format!(
                        "case {case} ({}), obs {k}, component {i}: analytic {fk} vs difference {fd}",
                        fam.name()
                    ));
                }
            }
        }
        compared += 1;
    }
    Ok(compared)
}
