//! Monte Carlo size and power estimation under the logistic and linear mixed
//! simulation models.
//!
//! Logistic: `logit P(y = 1 | b) = 1 + 0.8 x₁ + 0.5 x₂ + b₁ + z₁ b₂`.
//! Linear:   `y = 1 + x₁ + x₂ + b₁ + z₁ b₂ + ε`, `ε ~ N(0, σ²)`.
//! Covariates are standard normal and redrawn every replication; the
//! random-effect design is `(1, z₁)` and `b ~ N(0, σ₁²[[1, ρ₁], [ρ₁, ρ₂]])`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covparam::{make_grid, GridSpec, NuisanceGrid};
use crate::data::{Cluster, Dataset, Observation};
use crate::error::{Error, Result};
use crate::expfam::FamilySpec;
use crate::nullfit::fit_null;
use crate::resample::{p_values, run_resampling, PValues};
use crate::scorestats::{compute_profile, sup_statistics, ScoreContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimModel {
    Logistic,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Bernoulli,
    Binomial,
}

/// Whether the grid spans correlated shapes or only `γ₂ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    Considered,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: SimModel,
    pub response: Response,
    /// Binomial index when `response` is binomial.
    pub trials: u32,
    pub n: usize,
    pub m: usize,
    pub sigma1_sq: f64,
    pub rho1: f64,
    pub rho2: f64,
    /// Scale of the per-observation perturbation `σ₂² v`, `v ~ N(0, 1)`.
    pub sigma2_sq: f64,
    /// Base noise variance of the linear model.
    pub noise_var: f64,
    pub reps: usize,
    pub r0: usize,
    pub alpha: f64,
    pub seed: u64,
    pub grid: GridSpec,
    pub mode: CorrelationMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            model: SimModel::Logistic,
            response: Response::Bernoulli,
            trials: 5,
            n: 50,
            m: 5,
            sigma1_sq: 0.0,
            rho1: 0.5,
            rho2: 1.0,
            sigma2_sq: 0.0,
            noise_var: 1.0,
            reps: 300,
            r0: 200,
            alpha: 0.05,
            seed: 1,
            grid: GridSpec::coarse(),
            mode: CorrelationMode::Considered,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n == 0 || self.m == 0 || self.reps == 0 || self.r0 == 0 {
            return cfg("n, m, reps and r0 must all be positive".into());
        }
        if self.response == Response::Binomial && self.trials == 0 {
            return cfg("binomial trials must be at least 1".into());
        }
        if !(self.sigma1_sq >= 0.0 && self.sigma2_sq >= 0.0) {
            return cfg("sigma1-sq and sigma2-sq must be nonnegative".into());
        }
        if !(self.noise_var > 0.0) {
            return cfg("noise variance must be positive".into());
        }
        if !(self.rho2 >= 0.0 && self.rho1 * self.rho1 <= self.rho2) {
            return cfg(format!(
                "random-effect covariance is not positive semidefinite: rho1^2 = {} > rho2 = {}",
                self.rho1 * self.rho1,
                self.rho2
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return cfg(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        self.grid.validate()
    }

    pub fn family(&self) -> FamilySpec {
        match (self.model, self.response) {
            (SimModel::Linear, _) => FamilySpec::gaussian(),
            (SimModel::Logistic, Response::Bernoulli) => FamilySpec::bernoulli(),
            (SimModel::Logistic, Response::Binomial) => {
                FamilySpec::binomial(self.trials.max(1)).expect("trials >= 1")
            }
        }
    }

    pub fn model_label(&self) -> String {
        match (self.model, self.response) {
            (SimModel::Linear, _) => "linear".into(),
            (SimModel::Logistic, Response::Bernoulli) => "logistic-bernoulli".into(),
            (SimModel::Logistic, Response::Binomial) => format!("logistic-binomial{}", self.trials),
        }
    }

    pub fn test_grid(&self) -> Result<NuisanceGrid> {
        let grid = make_grid(self.grid)?;
        Ok(match self.mode {
            CorrelationMode::Considered => grid,
            CorrelationMode::Ignored => grid.uncorrelated(),
        })
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Random effects `(b₁, b₂)` with covariance `σ₁²[[1, ρ₁], [ρ₁, ρ₂]]`.
pub fn draw_random_effects(config: &SimConfig, rng: &mut impl Rng) -> (f64, f64) {
    let (u1, u2) = (normal(rng), normal(rng));
    let s = config.sigma1_sq.sqrt();
    let l22 = (config.rho2 - config.rho1 * config.rho1).max(0.0).sqrt();
    (s * u1, s * (config.rho1 * u1 + l22 * u2))
}

fn draw_response(config: &SimConfig, eta: f64, rng: &mut impl Rng) -> f64 {
    let p = logistic(eta);
    match config.response {
        Response::Bernoulli => f64::from(rng.random::<f64>() < p),
        Response::Binomial => (0..config.trials).filter(|_| rng.random::<f64>() < p).count() as f64,
    }
}

fn build(config: &SimConfig, rng: &mut impl Rng, perturb: bool) -> Result<Dataset> {
    config.validate()?;
    let clusters = (0..config.n)
        .map(|i| {
            let (b1, b2) = draw_random_effects(config, rng);
            let observations = (0..config.m)
                .map(|_| {
                    let x1 = normal(rng);
                    let x2 = normal(rng);
                    let z1 = normal(rng);
                    let v = if perturb { normal(rng) } else { 0.0 };
                    let re = b1 + z1 * b2;
                    let y = match config.model {
                        SimModel::Logistic => {
                            let eta = 1.0 + config.sigma2_sq * v + 0.8 * x1 + 0.5 * x2 + re;
                            draw_response(config, eta, rng)
                        }
                        SimModel::Linear => {
                            let var = config.noise_var * (v * config.sigma2_sq).exp();
                            1.0 + x1 + x2 + re + var.sqrt() * normal(rng)
                        }
                    };
                    let mut o = Observation::new(y, vec![1.0, x1, x2], vec![1.0, z1]);
                    if config.response == Response::Binomial && config.model == SimModel::Logistic {
                        o.trials = Some(config.trials);
                    }
                    o
                })
                .collect();
            Cluster {
                id: format!("c{i}"),
                observations,
            }
        })
        .collect();
    Dataset::new(clusters)
}

/// Logistic mixed model with bernoulli or binomial response.
pub fn gen_logistic(config: &SimConfig, rng: &mut impl Rng) -> Result<Dataset> {
    if config.model != SimModel::Logistic {
        return Err(Error::Config("gen_logistic needs the logistic model".into()));
    }
    build(config, rng, false)
}

/// Linear mixed model with gaussian noise.
pub fn gen_linear(config: &SimConfig, rng: &mut impl Rng) -> Result<Dataset> {
    if config.model != SimModel::Linear {
        return Err(Error::Config("gen_linear needs the linear model".into()));
    }
    build(config, rng, false)
}

/// Null model with independent per-observation overdispersion: a random
/// intercept shift `σ₂² v` (logistic) or noise variance `σ² exp(σ₂² v)`
/// (linear). Requires `σ₁² = 0`.
pub fn gen_perturbed(config: &SimConfig, rng: &mut impl Rng) -> Result<Dataset> {
    if config.sigma1_sq != 0.0 {
        return Err(Error::Config("perturbed design requires sigma1-sq = 0".into()));
    }
    build(config, rng, true)
}

/// The generator implied by the config: perturbed when `σ₂² > 0`.
pub fn generate(config: &SimConfig, rng: &mut impl Rng) -> Result<Dataset> {
    if config.sigma2_sq > 0.0 {
        gen_perturbed(config, rng)
    } else {
        match config.model {
            SimModel::Logistic => gen_logistic(config, rng),
            SimModel::Linear => gen_linear(config, rng),
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for `(seed, replication, purpose)`.
pub fn derive_seed(seed: u64, replication: u64, purpose: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ replication) ^ purpose)
}

pub fn replication_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, replication, 0))
}

/// Per-replication p-values; `None` marks a replication whose null fit failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub p_values: Vec<Option<PValues>>,
}

impl SimOutcome {
    pub fn excluded(&self) -> usize {
        self.p_values.iter().filter(|p| p.is_none()).count()
    }
}

fn one_replication(config: &SimConfig, grid: &NuisanceGrid, r: u64) -> Result<PValues> {
    let mut rng = replication_rng(config.seed, r);
    let data = generate(config, &mut rng)?;
    let fit = fit_null(&data, config.family())?;
    let ctx = ScoreContext::new(&data, &fit)?;
    let profile = compute_profile(&ctx, &data, grid)?;
    let observed = sup_statistics(&profile)?;
    let reps = run_resampling(&ctx, &profile, config.r0, derive_seed(config.seed, r, 1))?;
    p_values(&observed, &reps)
}

pub fn simulate(config: &SimConfig) -> Result<SimOutcome> {
    config.validate()?;
    let grid = config.test_grid()?;
    let p_values = (0..config.reps as u64)
        .into_par_iter()
        .map(|r| match one_replication(config, &grid, r) {
            Ok(p) => Ok(Some(p)),
            Err(Error::Convergence { .. }) | Err(Error::Data { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimOutcome { p_values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub model: String,
    pub statistic: String,
    pub param: String,
    pub value: f64,
    pub mode: String,
    pub rate: f64,
    pub se: f64,
    pub reps: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
}

impl RateTable {
    pub fn from_outcome(config: &SimConfig, outcome: &SimOutcome, alpha: f64) -> Self {
        let valid: Vec<&PValues> = outcome.p_values.iter().flatten().collect();
        let reps = valid.len();
        let (param, value) = if config.sigma2_sq > 0.0 {
            ("sigma2_sq", config.sigma2_sq)
        } else {
            ("sigma1_sq", config.sigma1_sq)
        };
        let mode = match config.mode {
            CorrelationMode::Considered => "considered",
            CorrelationMode::Ignored => "ignored",
        };
        let pick: [(&str, fn(&PValues) -> f64); 3] =
            [("S_O", |p| p.p_o), ("S_P", |p| p.p_p), ("S_S", |p| p.p_s)];
        let rows = pick
            .iter()
            .map(|(name, f)| {
                let hits = valid.iter().filter(|p| f(p) <= alpha).count();
                let rate = if reps == 0 { f64::NAN } else { hits as f64 / reps as f64 };
                RateRow {
                    model: config.model_label(),
                    statistic: name.to_string(),
                    param: param.into(),
                    value,
                    mode: mode.into(),
                    rate,
                    se: (rate * (1.0 - rate) / reps as f64).sqrt(),
                    reps,
                    excluded: outcome.excluded(),
                }
            })
            .collect();
        RateTable { rows }
    }

    pub fn rate(&self, statistic: &str) -> Option<&RateRow> {
        self.rows.iter().find(|r| r.statistic == statistic)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "statistic", "param", "value", "mode", "rate", "se", "reps", "excluded"])
            .map_err(|e| Error::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.statistic.clone(),
                r.param.clone(),
                r.value.to_string(),
                r.mode.clone(),
                format!("{:.6}", r.rate),
                format!("{:.6}", r.se),
                r.reps.to_string(),
                r.excluded.to_string(),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn estimate_rates(config: &SimConfig) -> Result<RateTable> {
    let outcome = simulate(config)?;
    Ok(RateTable::from_outcome(config, &outcome, config.alpha))
}
