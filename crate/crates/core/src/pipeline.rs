//! End-to-end homogeneity test on one dataset.

use serde::{Deserialize, Serialize};

use crate::covparam::{make_grid, GammaPoint, GridSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{FamilyKind, FamilySpec};
use crate::nullfit::fit_null;
use crate::resample::{p_values, run_resampling};
use crate::scorestats::{compute_profile, sup_statistics, ScoreContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub family: FamilyKind,
    /// Default binomial index; rows may override it.
    pub trials: u32,
    pub r0: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub alpha: f64,
}

impl TestConfig {
    pub fn new(family: FamilyKind, seed: u64) -> Self {
        TestConfig {
            family,
            trials: 1,
            r0: 1000,
            seed,
            grid: GridSpec::full(),
            alpha: 0.05,
        }
    }

    pub fn family_spec(&self) -> Result<FamilySpec> {
        FamilySpec::new(self.family, self.trials).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.family_spec()?;
        self.grid.validate()?;
        if self.r0 == 0 {
            return Err(Error::Config("r0 must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticReport {
    pub value: f64,
    pub p_value: f64,
    pub argmax: GammaPoint,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticsReport {
    pub s_o: StatisticReport,
    pub s_p: StatisticReport,
    pub s_s: StatisticReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub family: FamilyKind,
    pub trials: Option<u32>,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub beta_hat: Vec<f64>,
    /// Estimated dispersion φ̂ (1 for discrete families).
    pub phi_hat: f64,
    /// Residual variance `1/φ̂` for gaussian data.
    pub sigma2_hat: Option<f64>,
    pub iterations: usize,
    pub grid: GridSpec,
    pub grid_points: usize,
    pub r0: usize,
    pub seed: u64,
    pub alpha: f64,
    pub statistics: StatisticsReport,
    pub degenerate_points: usize,
    pub floored_points: usize,
    pub warnings: Vec<String>,
}

impl TestReport {
    /// Pretty JSON with keys in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::data(format!("invalid report: {e}")))
    }
}

/// Fit the null model, profile the grid, resample, and assemble the report.
pub fn run_test(dataset: &Dataset, config: &TestConfig) -> Result<TestReport> {
    config.validate()?;
    let family = config.family_spec()?;
    let grid = make_grid(config.grid)?;
    let fit = fit_null(dataset, family)?;
    let ctx = ScoreContext::new(dataset, &fit)?;
    let profile = compute_profile(&ctx, dataset, &grid)?;
    let observed = sup_statistics(&profile)?;
    let reps = run_resampling(&ctx, &profile, config.r0, config.seed)?;
    let p = p_values(&observed, &reps)?;

    let mut warnings = Vec::new();
    let degenerate = profile.degenerate_count();
    let floored = profile.floored_count();
    if degenerate > 0 {
        warnings.push(format!(
            "{degenerate} of {} grid points have a vanishing variance and contribute 0 to the supremum",
            grid.len()
        ));
    }
    if floored > 0 {
        warnings.push(format!(
            "{floored} grid points had a negative corrected overdispersion variance, floored at 0"
        ));
    }
    let stat = |value: f64, p_value: f64, argmax: GammaPoint| StatisticReport {
        value,
        p_value,
        argmax,
        reject: p_value <= config.alpha,
    };
    Ok(TestReport {
        family: config.family,
        trials: (config.family == FamilyKind::Binomial).then_some(config.trials),
        n_clusters: dataset.n_clusters(),
        n_obs: dataset.n_obs(),
        beta_hat: fit.beta_hat.iter().copied().collect(),
        phi_hat: fit.phi_hat,
        sigma2_hat: fit.sigma2_hat(),
        iterations: fit.iterations,
        grid: config.grid,
        grid_points: grid.len(),
        r0: config.r0,
        seed: config.seed,
        alpha: config.alpha,
        statistics: StatisticsReport {
            s_o: stat(observed.s_o, p.p_o, observed.argmax_o),
            s_p: stat(observed.s_p, p.p_p, observed.argmax_p),
            s_s: stat(observed.s_s, p.p_s, observed.argmax_s),
        },
        degenerate_points: degenerate,
        floored_points: floored,
        warnings,
    })
}
