//! Exponential-family densities `exp[φ{yθ − a(θ)} + c(y, φ)]` with canonical
//! links, the per-observation score terms in the random-effect direction, and
//! the moments of those terms under the null model.
//!
//! Only canonical links are supported, so `θ = η` and the link derivatives are
//! `k̇ = 1`, `k̈ = 0` throughout.

mod oracle;

pub use oracle::{moment_oracle, oracle_score_means};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Bernoulli,
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispersionMode {
    /// φ = 1.
    Fixed,
    /// φ estimated by maximum likelihood (gaussian only).
    Estimated,
}

/// Response family with its canonical link.
///
/// `trials` is the binomial index; it is always 1 for bernoulli and unused for
/// gaussian. Per-observation overrides go through [`FamilySpec::with_trials`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilySpec {
    kind: FamilyKind,
    trials: u32,
}

impl FamilySpec {
    pub fn gaussian() -> Self {
        FamilySpec {
            kind: FamilyKind::Gaussian,
            trials: 1,
        }
    }

    pub fn bernoulli() -> Self {
        FamilySpec {
            kind: FamilyKind::Bernoulli,
            trials: 1,
        }
    }

    pub fn binomial(trials: u32) -> Result<Self> {
        if trials == 0 {
            return Err(Error::Parameter("binomial requires trials >= 1".into()));
        }
        Ok(FamilySpec {
            kind: FamilyKind::Binomial,
            trials,
        })
    }

    pub fn new(kind: FamilyKind, trials: u32) -> Result<Self> {
        match kind {
            FamilyKind::Gaussian => Ok(Self::gaussian()),
            FamilyKind::Bernoulli => Ok(Self::bernoulli()),
            FamilyKind::Binomial => Self::binomial(trials),
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn trials(&self) -> u32 {
        self.trials
    }

    pub fn is_discrete(&self) -> bool {
        self.kind != FamilyKind::Gaussian
    }

    pub fn dispersion_mode(&self) -> DispersionMode {
        match self.kind {
            FamilyKind::Gaussian => DispersionMode::Estimated,
            _ => DispersionMode::Fixed,
        }
    }

    /// The same family with a per-observation binomial index.
    ///
    /// Bernoulli accepts only `trials = 1`; gaussian ignores the value.
    pub fn with_trials(&self, trials: u32) -> Result<Self> {
        match self.kind {
            FamilyKind::Gaussian => Ok(*self),
            FamilyKind::Bernoulli if trials == 1 => Ok(*self),
            FamilyKind::Bernoulli => Err(Error::Parameter(format!(
                "bernoulli observations must have trials = 1, got {trials}"
            ))),
            FamilyKind::Binomial => Self::binomial(trials),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Bernoulli => "bernoulli",
            FamilyKind::Binomial => "binomial",
        }
    }

    /// Whether `y` lies in the support of the response.
    pub fn in_support(&self, y: f64) -> bool {
        match self.kind {
            FamilyKind::Gaussian => y.is_finite(),
            _ => y.is_finite() && y >= 0.0 && y <= self.trials as f64 && y.fract() == 0.0,
        }
    }
}

/// `a(θ)` and its first four derivatives at a canonical parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulantDerivs {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^η)` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

pub fn cumulant_derivs(family: FamilySpec, theta: f64) -> CumulantDerivs {
    match family.kind {
        FamilyKind::Gaussian => CumulantDerivs {
            a0: 0.5 * theta * theta,
            a1: theta,
            a2: 1.0,
            a3: 0.0,
            a4: 0.0,
        },
        FamilyKind::Bernoulli | FamilyKind::Binomial => {
            let n = family.trials as f64;
            let p = logistic(theta);
            let pq = p * (1.0 - p);
            CumulantDerivs {
                a0: n * softplus(theta),
                a1: n * p,
                a2: n * pq,
                a3: n * pq * (1.0 - 2.0 * p),
                a4: n * pq * (1.0 - 6.0 * pq),
            }
        }
    }
}

/// Conditional mean `μ = g(η)`.
pub fn link_mean(family: FamilySpec, eta: f64) -> Result<f64> {
    if !eta.is_finite() {
        return Err(Error::Domain(format!("linear predictor must be finite, got {eta}")));
    }
    Ok(match family.kind {
        FamilyKind::Gaussian => eta,
        _ => family.trials as f64 * logistic(eta),
    })
}

/// Per-observation score terms at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTerms {
    /// First derivative of the log density in the random-effect direction.
    pub u: f64,
    /// Negative second derivative.
    pub v: f64,
    /// Raw residual `y − μ`.
    pub e: f64,
    pub mu: f64,
}

pub fn score_terms(family: FamilySpec, y: f64, eta: f64, phi: f64) -> Result<ScoreTerms> {
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::Domain(format!("dispersion must be positive, got {phi}")));
    }
    if !family.in_support(y) {
        return Err(Error::data(format!(
            "response {y} outside the support of the {} family (trials = {})",
            family.name(),
            family.trials
        )));
    }
    let mu = link_mean(family, eta)?;
    let a = cumulant_derivs(family, eta);
    let e = y - mu;
    // U = φ e k̇ and V = φ ä k̇² − φ e k̈ with k̇ = 1, k̈ = 0.
    Ok(ScoreTerms {
        u: phi * e,
        v: phi * a.a2,
        e,
        mu,
    })
}

/// Log-likelihood kernel `φ{yθ − a(θ)}` without `c(y, φ)`.
pub fn log_kernel(family: FamilySpec, y: f64, eta: f64, phi: f64) -> f64 {
    let a = cumulant_derivs(family, eta);
    phi * (y * eta - a.a0)
}

/// Moments of `(U, V)` under the null model at a given linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSet {
    pub eu2: f64,
    pub eu4: f64,
    pub ev2: f64,
    pub eu2v: f64,
    pub var_u2_minus_v: f64,
    /// Part of `Var(U² − V)` not explained by a linear regression on `U`,
    /// `Var(U² − V) − φ a⁽³⁾²/ä`.
    pub resid_u2_minus_v: f64,
}

/// Closed-form moments from the cumulants of `y`.
///
/// The cumulants are `κ_r = a⁽ʳ⁾(θ)/φ^{r−1}`; with a canonical link `V` is
/// non-random given `η`, so `E V² = E(U²)·V = φ²ä²`.
pub fn central_moments(family: FamilySpec, eta: f64, phi: f64) -> MomentSet {
    let a = cumulant_derivs(family, eta);
    let eu2 = phi * a.a2;
    let eu4 = 3.0 * phi * phi * a.a2 * a.a2 + phi * a.a4;
    let v = phi * a.a2;
    let ev2 = v * v;
    let eu2v = eu2 * v;
    // E U⁴ + E V² − 2 E U²V collapses to 2φ²ä² + φa⁽⁴⁾; evaluate it in that
    // form to avoid cancellation.
    let var_u2_minus_v = (2.0 * phi * phi * a.a2 * a.a2 + phi * a.a4).max(0.0);
    // Subtracting φ a⁽³⁾²/ä cancels badly for binary data, where U² − V is
    // exactly linear in U; use the per-family closed forms instead.
    let resid_u2_minus_v = match family.kind {
        FamilyKind::Gaussian => 2.0 * phi * phi,
        FamilyKind::Bernoulli | FamilyKind::Binomial => {
            let t = f64::from(family.trials);
            2.0 * a.a2 * a.a2 * (t - 1.0) / t
        }
    };
    MomentSet {
        eu2,
        eu4,
        ev2,
        eu2v,
        var_u2_minus_v,
        resid_u2_minus_v,
    }
}
