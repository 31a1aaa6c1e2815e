//! Maximum-likelihood fit of the model without random effects, plus the
//! influence vectors and information matrix used to correct plug-in variances.
//!
//! Under the null hypothesis observations are independent, so clustering is
//! ignored here.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{cumulant_derivs, link_mean, log_kernel, DispersionMode, FamilySpec};

pub const SCORE_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 100;
pub const MAX_HALVINGS: usize = 30;
/// Fitted linear predictors beyond this magnitude signal separation. Under
/// separation Newton stops on the score tolerance only once some |η| exceeds
/// ln(1/SCORE_TOLERANCE) ≈ 18.4, so this bound always catches it.
const SEPARATION_ETA: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NullFit {
    pub family: FamilySpec,
    pub beta_hat: DVector<f64>,
    /// Dispersion φ̂; 1 for discrete families, `N / Σe²` for gaussian.
    pub phi_hat: f64,
    pub eta_hat: Vec<f64>,
    pub mu_hat: Vec<f64>,
    /// Fisher information for β, `φ Σ ä x xᵀ`.
    pub information: DMatrix<f64>,
    /// Fisher information for φ, `N / (2φ²)`, when φ is estimated.
    pub phi_information: Option<f64>,
    /// Per-observation `F_K` with `√N(ξ̂ − ξ) ≈ N^{-1/2} Σ F_K`; the last
    /// component is the φ part when φ is estimated.
    pub influence: Vec<DVector<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    /// Log-likelihood kernel at each accepted iterate (φ = 1).
    pub loglik_trace: Vec<f64>,
}

impl NullFit {
    /// Dimension of ξ: β plus φ when estimated.
    pub fn xi_dim(&self) -> usize {
        self.beta_hat.len() + usize::from(self.phi_information.is_some())
    }

    /// Residual variance `1/φ̂` for gaussian fits.
    pub fn sigma2_hat(&self) -> Option<f64> {
        self.phi_information.map(|_| 1.0 / self.phi_hat)
    }
}

/// Family of a single observation after applying its trials override.
pub(crate) fn observation_families(dataset: &Dataset, family: FamilySpec) -> Result<Vec<FamilySpec>> {
    dataset
        .observations()
        .enumerate()
        .map(|(k, o)| {
            let fam = family
                .with_trials(o.trials.unwrap_or(family.trials()))
                .map_err(|e| located(k, o.row, e.to_string()))?;
            if !fam.in_support(o.y) {
                return Err(located(
                    k,
                    o.row,
                    format!(
                        "response {} outside the support of the {} family (trials = {})",
                        o.y,
                        fam.name(),
                        fam.trials()
                    ),
                ));
            }
            Ok(fam)
        })
        .collect()
}

fn located(k: usize, row: Option<usize>, message: String) -> Error {
    match row {
        Some(r) => Error::data_at(r, Some("y"), message),
        None => Error::data(format!("observation {k}: {message}")),
    }
}

fn design(dataset: &Dataset) -> (Vec<&[f64]>, Vec<f64>) {
    dataset
        .observations()
        .map(|o| (o.x.as_slice(), o.y))
        .unzip()
}

fn check_rank(xs: &[&[f64]], p: usize) -> Result<()> {
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    for x in xs {
        for a in 0..p {
            for b in 0..p {
                xtx[(a, b)] += x[a] * x[b];
            }
        }
    }
    let eig = SymmetricEigen::new(xtx).eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::data("fixed-effect design matrix is rank deficient"));
    }
    Ok(())
}

struct Evaluation {
    eta: Vec<f64>,
    loglik: f64,
    score: DVector<f64>,
    hessian: DMatrix<f64>,
}

fn evaluate(
    xs: &[&[f64]],
    ys: &[f64],
    fams: &[FamilySpec],
    weights: Option<&[f64]>,
    beta: &DVector<f64>,
) -> Evaluation {
    let p = beta.len();
    let mut eta = Vec::with_capacity(xs.len());
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);
    for (k, x) in xs.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        let e_k: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        let a = cumulant_derivs(fams[k], e_k);
        loglik += w * log_kernel(fams[k], ys[k], e_k, 1.0);
        let resid = ys[k] - a.a1;
        for i in 0..p {
            score[i] += w * resid * x[i];
            for j in 0..p {
                hessian[(i, j)] += w * a.a2 * x[i] * x[j];
            }
        }
        eta.push(e_k);
    }
    Evaluation {
        eta,
        loglik,
        score,
        hessian,
    }
}

fn loglik_at(xs: &[&[f64]], ys: &[f64], fams: &[FamilySpec], weights: Option<&[f64]>, beta: &DVector<f64>) -> f64 {
    xs.iter()
        .enumerate()
        .map(|(k, x)| {
            let w = weights.map_or(1.0, |w| w[k]);
            let eta: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            w * log_kernel(fams[k], ys[k], eta, 1.0)
        })
        .sum()
}

pub fn fit_null(dataset: &Dataset, family: FamilySpec) -> Result<NullFit> {
    fit_null_weighted(dataset, family, None)
}

/// Null fit with optional per-observation likelihood weights.
///
/// Weights exist to probe the fit's sensitivity to a single observation; the
/// test statistics always use the unweighted fit.
pub fn fit_null_weighted(
    dataset: &Dataset,
    family: FamilySpec,
    weights: Option<&[f64]>,
) -> Result<NullFit> {
    if let Some(w) = weights {
        if w.len() != dataset.n_obs() {
            return Err(Error::Dimension(format!(
                "{} weights for {} observations",
                w.len(),
                dataset.n_obs()
            )));
        }
    }
    let fams = observation_families(dataset, family)?;
    let (xs, ys) = design(dataset);
    let p = dataset.p();
    check_rank(&xs, p)?;

    let mut beta = DVector::zeros(p);
    let mut ev = evaluate(&xs, &ys, &fams, weights, &beta);
    let mut trace = vec![ev.loglik];
    let mut iterations = 0;
    loop {
        let score_norm = ev.score.amax();
        if score_norm <= SCORE_TOLERANCE {
            break;
        }
        if iterations == MAX_ITERATIONS {
            return Err(Error::Convergence {
                iterations,
                score_norm,
                last_beta: beta.iter().copied().collect(),
                message: "iteration limit reached".into(),
            });
        }
        let chol = Cholesky::new(ev.hessian.clone()).ok_or_else(|| Error::Convergence {
            iterations,
            score_norm,
            last_beta: beta.iter().copied().collect(),
            message: "information matrix became singular".into(),
        })?;
        let step = chol.solve(&ev.score);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step * t;
            let ll = loglik_at(&xs, &ys, &fams, weights, &cand);
            if ll.is_finite() && ll >= ev.loglik - 1e-12 * ev.loglik.abs() {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            return Err(Error::Convergence {
                iterations,
                score_norm,
                last_beta: beta.iter().copied().collect(),
                message: "step halving failed to increase the likelihood".into(),
            });
        };
        beta = next;
        ev = evaluate(&xs, &ys, &fams, weights, &beta);
        trace.push(ev.loglik);
        iterations += 1;
    }

    let score_norm = ev.score.amax();
    if family.is_discrete() {
        let max_eta = ev.eta.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        if max_eta > SEPARATION_ETA {
            return Err(Error::Convergence {
                iterations,
                score_norm,
                last_beta: beta.iter().copied().collect(),
                message: format!(
                    "fitted probabilities numerically 0 or 1 (|eta| = {max_eta:.1}); complete separation"
                ),
            });
        }
    }

    let mu: Vec<f64> = ev
        .eta
        .iter()
        .zip(&fams)
        .map(|(&e, &f)| link_mean(f, e))
        .collect::<Result<_>>()?;
    let (phi_hat, phi_information) = match family.dispersion_mode() {
        DispersionMode::Fixed => (1.0, None),
        DispersionMode::Estimated => {
            let (mut sw, mut swe2) = (0.0, 0.0);
            for k in 0..ys.len() {
                let w = weights.map_or(1.0, |w| w[k]);
                let e = ys[k] - mu[k];
                sw += w;
                swe2 += w * e * e;
            }
            if !(swe2 > 0.0) {
                return Err(Error::data("residual variance is zero; dispersion is not identifiable"));
            }
            let phi = sw / swe2;
            (phi, Some(sw / (2.0 * phi * phi)))
        }
    };

    let mut fit = NullFit {
        family,
        beta_hat: beta,
        phi_hat,
        eta_hat: ev.eta,
        mu_hat: mu,
        information: ev.hessian * phi_hat,
        phi_information,
        influence: Vec::new(),
        converged: true,
        iterations,
        score_norm,
        loglik_trace: trace,
    };
    fit.influence = influence_vectors(dataset, &fit)?;
    Ok(fit)
}

/// `φ Σ_K ä(θ_K) x_K x_Kᵀ` at the fitted linear predictors.
pub fn information_matrix(dataset: &Dataset, fit: &NullFit) -> Result<DMatrix<f64>> {
    let fams = observation_families(dataset, fit.family)?;
    let p = dataset.p();
    let mut info = DMatrix::zeros(p, p);
    for (k, o) in dataset.observations().enumerate() {
        let a2 = cumulant_derivs(fams[k], fit.eta_hat[k]).a2;
        for i in 0..p {
            for j in 0..p {
                info[(i, j)] += fit.phi_hat * a2 * o.x[i] * o.x[j];
            }
        }
    }
    Ok(info)
}

/// `F_K = N · I(ξ̂)⁻¹ · s_K(ξ̂)` where `s_K` is the per-observation score.
///
/// The β part reduces to `N (Σ ä x xᵀ)⁻¹ e_K x_K`; for gaussian the φ part is
/// `φ(1 − φe_K²)`.
pub fn influence_vectors(dataset: &Dataset, fit: &NullFit) -> Result<Vec<DVector<f64>>> {
    let n = dataset.n_obs() as f64;
    let info = information_matrix(dataset, fit)?;
    let chol: Cholesky<f64, Dyn> = Cholesky::new(info)
        .ok_or_else(|| Error::data("information matrix is singular"))?;
    let phi = fit.phi_hat;
    let p = dataset.p();
    let extra = usize::from(fit.phi_information.is_some());
    Ok(dataset
        .observations()
        .enumerate()
        .map(|(k, o)| {
            let e = o.y - fit.mu_hat[k];
            let s = DVector::from_iterator(p, o.x.iter().map(|&x| phi * e * x));
            let beta_part = chol.solve(&s) * n;
            let mut f = DVector::zeros(p + extra);
            f.rows_mut(0, p).copy_from(&beta_part);
            if extra == 1 {
                f[p] = phi * (1.0 - phi * e * e);
            }
            f
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, Observation};

    fn intercept_only(ys: &[f64]) -> Dataset {
        let obs = ys.iter().map(|&y| Observation::new(y, vec![1.0], vec![1.0])).collect();
        Dataset::new(vec![Cluster { id: "a".into(), observations: obs }]).unwrap()
    }

    #[test]
    fn gaussian_intercept_closed_form() {
        let fit = fit_null(&intercept_only(&[1.0, 2.0, 3.0]), FamilySpec::gaussian()).unwrap();
        assert!((fit.beta_hat[0] - 2.0).abs() < 1e-12);
        assert!((fit.phi_hat - 1.5).abs() < 1e-12);
        assert!((fit.sigma2_hat().unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(fit.xi_dim(), 2);
    }

    #[test]
    fn bernoulli_balanced_intercept_is_zero() {
        let fit = fit_null(&intercept_only(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]), FamilySpec::bernoulli()).unwrap();
        assert!(fit.beta_hat[0].abs() < 1e-12);
        assert!((fit.information[(0, 0)] - 6.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_balanced_intercept_is_zero() {
        let fam = FamilySpec::binomial(5).unwrap();
        let fit = fit_null(&intercept_only(&[2.0, 3.0, 1.0, 4.0]), fam).unwrap();
        assert!(fit.beta_hat[0].abs() < 1e-12);
    }

    #[test]
    fn separation_is_a_convergence_error() {
        let obs = (0..8)
            .map(|i| {
                let x = i as f64 - 3.5;
                Observation::new(if x > 0.0 { 1.0 } else { 0.0 }, vec![1.0, x], vec![1.0])
            })
            .collect();
        let d = Dataset::new(vec![Cluster { id: "a".into(), observations: obs }]).unwrap();
        let err = fit_null(&d, FamilySpec::bernoulli()).unwrap_err();
        assert!(matches!(err, Error::Convergence { .. }), "{err:?}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn constant_binary_response_is_a_convergence_error() {
        let obs = (0..3)
            .map(|i| Observation::new(1.0, vec![1.0, i as f64], vec![1.0]))
            .collect();
        let d = Dataset::new(vec![Cluster { id: "a".into(), observations: obs }]).unwrap();
        let err = fit_null(&d, FamilySpec::bernoulli()).unwrap_err();
        assert!(matches!(err, Error::Convergence { .. }), "{err:?}");
    }

    #[test]
    fn rank_deficient_design_is_a_data_error() {
        let obs = (0..5)
            .map(|i| Observation::new(i as f64, vec![1.0, 2.0], vec![1.0]))
            .collect();
        let d = Dataset::new(vec![Cluster { id: "a".into(), observations: obs }]).unwrap();
        assert!(matches!(fit_null(&d, FamilySpec::gaussian()), Err(Error::Data { .. })));
    }

    #[test]
    fn out_of_support_response_names_the_row() {
        let mut obs = vec![Observation::new(2.0, vec![1.0], vec![1.0])];
        obs[0].row = Some(7);
        let d = Dataset::new(vec![Cluster { id: "a".into(), observations: obs }]).unwrap();
        match fit_null(&d, FamilySpec::bernoulli()) {
            Err(Error::Data { row, .. }) => assert_eq!(row, Some(7)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn information_examples() {
        let d = intercept_only(&[1.0, 0.0, 1.0, 0.0]);
        let fit = fit_null(&d, FamilySpec::bernoulli()).unwrap();
        assert!((information_matrix(&d, &fit).unwrap()[(0, 0)] - 1.0).abs() < 1e-12);

        // orthonormal columns, φ̂ = 1
        let s = 0.5f64.sqrt();
        let xs = [[s, s], [s, -s]];
        let ys = [1.0, -1.0];
        let obs = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| Observation::new(y, x.to_vec(), vec![1.0]))
            .collect();
        let d = Dataset::new(vec![Cluster { id: "a".into(), observations: obs }]).unwrap();
        let mut fit = fit_null(&intercept_only(&[0.0, 1.0]), FamilySpec::gaussian()).unwrap();
        fit.phi_hat = 1.0;
        fit.eta_hat = vec![0.0, 0.0];
        let info = information_matrix(&d, &fit).unwrap();
        assert!((info - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn exact_fit_has_zero_beta_influence() {
        let d = Dataset::new(vec![Cluster {
            id: "a".into(),
            observations: (0..6)
                .map(|i| Observation::new((i % 3) as f64, vec![1.0, i as f64], vec![1.0]))
                .collect(),
        }])
        .unwrap();
        let fit = fit_null(&d, FamilySpec::gaussian()).unwrap();
        let obs = d
            .observations()
            .zip(&fit.mu_hat)
            .map(|(o, &m)| Observation::new(m, o.x.clone(), o.z.clone()))
            .collect();
        let exact = Dataset::new(vec![Cluster { id: "a".into(), observations: obs }]).unwrap();
        for fk in influence_vectors(&exact, &fit).unwrap() {
            assert!(fk.rows(0, 2).amax() < 1e-12);
        }
    }

    #[test]
    fn influence_sums_to_zero() {
        let obs = (0..12)
            .map(|i| {
                let x = (i as f64 * 0.7).sin();
                Observation::new(f64::from(i % 3 == 0 || x > 0.4), vec![1.0, x], vec![1.0])
            })
            .collect();
        let d = Dataset::new(vec![Cluster { id: "a".into(), observations: obs }]).unwrap();
        let fit = fit_null(&d, FamilySpec::bernoulli()).unwrap();
        let total = fit
            .influence
            .iter()
            .fold(DVector::zeros(2), |acc, f| acc + f);
        assert!(total.amax() / 12.0 < 1e-8);
    }
}
