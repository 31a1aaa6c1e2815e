//! Pairwise-correlation, overdispersion and combined score statistics over the
//! nuisance grid, their plug-in variances, and the one-sided supremum
//! statistics.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covparam::{build_blocks, w_matrix_q2, BlockCoefficients, GammaPoint, NuisanceGrid, WMatrix};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{central_moments, cumulant_derivs, score_terms};
use crate::nullfit::{observation_families, NullFit};

/// Relative size below which a variance is treated as zero.
pub const DEGENERACY_RTOL: f64 = 1e-12;
/// Relative size of the corrected overdispersion variance, against its
/// uncorrected value, below which cancellation noise dominates.
pub const CORRECTION_RTOL: f64 = 1e-9;

/// Per-observation quantities evaluated at the null fit.
#[derive(Debug, Clone)]
pub struct ScoreContext {
    pub n_obs: usize,
    pub q: usize,
    pub ranges: Vec<Range<usize>>,
    /// Random-effect covariates, row-major `N × q`.
    pub z: Vec<f64>,
    /// `Û_K`.
    pub u: Vec<f64>,
    /// `V̂_K`.
    pub v: Vec<f64>,
    /// `E U_K²` at the fitted values.
    pub eu2: Vec<f64>,
    /// `Var(U_K² − V_K)` at the fitted values.
    pub var_o: Vec<f64>,
    /// Part of `Var(U_K² − V_K)` not linear in `U_K`.
    pub resid_o: Vec<f64>,
    /// `a⁽³⁾ √(φ/ä)`: the linear part of `U_K² − V_K` per unit `b`, scaled
    /// by the square root of the β weight `φä`.
    pub lin_o: Vec<f64>,
    /// Orthonormal basis of `diag(√(φä)) X`, `N × p`.
    pub q_basis: DMatrix<f64>,
    /// φ̂ when the dispersion is estimated.
    pub phi_estimated: Option<f64>,
    /// `E[−∂_ξ (U_K² − V_K)]`, the per-unit-`b` contribution to `J_N`.
    pub deriv: Vec<DVector<f64>>,
    /// `F̂_K`.
    pub influence: Vec<DVector<f64>>,
    /// Inverse Fisher information of ξ.
    pub info_inv: DMatrix<f64>,
}

impl ScoreContext {
    pub fn new(dataset: &Dataset, fit: &NullFit) -> Result<Self> {
        let fams = observation_families(dataset, fit.family)?;
        let n = dataset.n_obs();
        let p = dataset.p();
        let xi = fit.xi_dim();
        let phi = fit.phi_hat;
        let mut z = Vec::with_capacity(n * dataset.q());
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut eu2 = Vec::with_capacity(n);
        let mut var_o = Vec::with_capacity(n);
        let mut resid_o = Vec::with_capacity(n);
        let mut lin_o = Vec::with_capacity(n);
        let mut wx = DMatrix::zeros(n, p);
        let mut deriv = Vec::with_capacity(n);
        for (k, o) in dataset.observations().enumerate() {
            let eta = fit.eta_hat[k];
            let st = score_terms(fams[k], o.y, eta, phi)?;
            let m = central_moments(fams[k], eta, phi);
            let a3 = cumulant_derivs(fams[k], eta).a3;
            z.extend_from_slice(&o.z);
            u.push(st.u);
            v.push(st.v);
            eu2.push(m.eu2);
            var_o.push(m.var_u2_minus_v);
            resid_o.push(m.resid_u2_minus_v);
            let a2 = cumulant_derivs(fams[k], eta).a2;
            let sw = (phi * a2).sqrt();
            lin_o.push(if a2 > 0.0 { a3 * (phi / a2).sqrt() } else { 0.0 });
            for i in 0..p {
                wx[(k, i)] = sw * o.x[i];
            }
            // β: −E ∂_β(φ²e² − φä) = φ a⁽³⁾ x.  φ: −E ∂_φ(φ²e² − φ) = −1.
            let mut d = DVector::zeros(xi);
            for i in 0..p {
                d[i] = phi * a3 * o.x[i];
            }
            if xi > p {
                d[p] = -1.0;
            }
            deriv.push(d);
        }
        let beta_inv = fit
            .information
            .clone()
            .cholesky()
            .ok_or_else(|| Error::data("information matrix is singular"))?
            .inverse();
        let mut info_inv = DMatrix::zeros(xi, xi);
        info_inv.view_mut((0, 0), (p, p)).copy_from(&beta_inv);
        if let Some(i_phi) = fit.phi_information {
            info_inv[(p, p)] = 1.0 / i_phi;
        }
        let influence = if fit.influence.len() == n {
            fit.influence.clone()
        } else {
            crate::nullfit::influence_vectors(dataset, fit)?
        };
        let q_basis = wx.qr().q();
        Ok(ScoreContext {
            n_obs: n,
            q: dataset.q(),
            ranges: dataset.cluster_ranges(),
            z,
            u,
            v,
            eu2,
            var_o,
            resid_o,
            lin_o,
            q_basis,
            phi_estimated: fit.phi_information.map(|_| phi),
            deriv,
            influence,
            info_inv,
        })
    }

    pub fn xi_dim(&self) -> usize {
        self.info_inv.nrows()
    }

    pub fn z_row(&self, k: usize) -> &[f64] {
        &self.z[k * self.q..(k + 1) * self.q]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawStatistics {
    pub t_p: f64,
    pub t_o: f64,
    pub t_s: f64,
}

/// `T_P = Σ_{K≠K'} b U U'` over ordered within-cluster pairs,
/// `T_O = Σ_K b_{KK}(U² − V)`, `T_S = T_P + T_O`.
///
/// `u` and `v` are in the cluster-major order of `blocks`.
pub fn raw_statistics(u: &[f64], v: &[f64], blocks: &BlockCoefficients) -> RawStatistics {
    let mut t_p = 0.0;
    let mut t_o = 0.0;
    let mut start = 0;
    for c in 0..blocks.n_clusters() {
        let m = blocks.size(c);
        let b = blocks.block(c);
        let uc = &u[start..start + m];
        let vc = &v[start..start + m];
        for j in 0..m {
            let mut row = 0.0;
            for k in 0..m {
                if k != j {
                    row += b[j * m + k] * uc[k];
                }
            }
            t_p += uc[j] * row;
            t_o += b[j * m + j] * (uc[j] * uc[j] - vc[j]);
        }
        start += m;
    }
    RawStatistics {
        t_p,
        t_o,
        t_s: t_p + t_o,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    pub i_ep: f64,
    pub i_to: f64,
    pub i_eo: f64,
    pub i_es: f64,
    /// `J_N(γ) = N⁻¹ Σ_K b_{KK} E[−∂_ξ(U_K² − V_K)]`.
    pub j_n: DVector<f64>,
    /// The plug-in difference `I_TO − Gᵀ I⁻¹ G` came out negative beyond
    /// rounding, a sign that the correction is numerically unreliable here.
    pub floored: bool,
}

/// Plug-in variances at one grid point.
///
/// `I_EP = 2 Σ_{K≠K'} b² EU_K² EU_{K'}²`, `I_TO = Σ b_{KK}² Var(U² − V)`, and
/// `I_EO = I_TO − N² J_Nᵀ I(ξ̂)⁻¹ J_N`, which is what the three-term
/// influence expansion reduces to when `F_K = N I⁻¹ s_K`.
pub fn variance_components(ctx: &ScoreContext, blocks: &BlockCoefficients) -> VarianceComponents {
    let n = ctx.n_obs;
    let mut i_ep = 0.0;
    let mut i_to = 0.0;
    let mut resid = 0.0;
    let mut b_sum = 0.0;
    let mut diag = Vec::with_capacity(n);
    let mut lin = DVector::zeros(n);
    let mut g = DVector::zeros(ctx.xi_dim());
    for (c, r) in ctx.ranges.iter().enumerate() {
        let m = r.len();
        let b = blocks.block(c);
        for j in 0..m {
            let kj = r.start + j;
            for k in 0..m {
                if k != j {
                    let bjk = b[j * m + k];
                    i_ep += bjk * bjk * ctx.eu2[kj] * ctx.eu2[r.start + k];
                }
            }
            let bjj = b[j * m + j];
            i_to += bjj * bjj * ctx.var_o[kj];
            resid += bjj * bjj * ctx.resid_o[kj];
            b_sum += bjj;
            diag.push(bjj);
            lin[kj] = bjj * ctx.lin_o[kj];
            g.axpy(bjj, &ctx.deriv[kj], 1.0);
        }
    }
    i_ep *= 2.0;

    // I_TO − Gᵀ I(ξ̂)⁻¹ G is the residual variance of T_O after projecting
    // out the score of ξ. Evaluate it as a sum of squares so that near
    // collinearity (binary data, where U² − V is linear in U) does not cancel.
    // The β part is a weighted least-squares residual norm.
    let mut r = lin;
    for _ in 0..2 {
        let coef = ctx.q_basis.tr_mul(&r);
        r -= &ctx.q_basis * coef;
    }
    let mut i_eo = resid + r.norm_squared();
    if let Some(phi) = ctx.phi_estimated {
        // Projecting out the φ score centers the constant 2φ² part of the
        // remainder.
        let mean = b_sum / n as f64;
        let centered: f64 = diag.iter().map(|b| (b - mean) * (b - mean)).sum();
        let two_phi2 = 2.0 * phi * phi;
        let excess: f64 = diag
            .iter()
            .zip(&ctx.resid_o)
            .map(|(b, ro)| b * b * (ro - two_phi2))
            .sum();
        i_eo = excess + two_phi2 * centered + r.norm_squared();
    }

    let plug_in = i_to - (g.transpose() * &ctx.info_inv * &g)[(0, 0)];
    let floored = plug_in < -CORRECTION_RTOL * i_to;
    let i_eo = i_eo.max(0.0);
    VarianceComponents {
        i_ep,
        i_to,
        i_eo,
        i_es: i_ep + i_eo,
        j_n: g / n as f64,
        floored,
    }
}

/// Which standardized channels are numerically undefined at a grid point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degeneracy {
    pub p: bool,
    pub o: bool,
    pub s: bool,
}

impl Degeneracy {
    pub fn any(&self) -> bool {
        self.p || self.o || self.s
    }

    pub fn of(var: &VarianceComponents) -> Self {
        let scale = var.i_ep + var.i_to;
        if !(scale > 0.0) {
            return Degeneracy { p: true, o: true, s: true };
        }
        let p = var.i_ep <= DEGENERACY_RTOL * scale;
        let o = var.i_to <= DEGENERACY_RTOL * scale || var.i_eo <= CORRECTION_RTOL * var.i_to;
        let s = (p && o) || var.i_es <= DEGENERACY_RTOL * scale;
        Degeneracy { p, o, s }
    }
}

/// `t / √var`, or 0 at a degenerate point.
pub fn standardize(t: f64, var: f64, degenerate: bool) -> f64 {
    if degenerate {
        0.0
    } else {
        t / var.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointProfile {
    pub gamma: GammaPoint,
    pub raw: RawStatistics,
    pub var: VarianceComponents,
    pub degenerate: Degeneracy,
    pub x_p: f64,
    pub x_o: f64,
    pub x_s: f64,
}

impl PointProfile {
    pub fn new(gamma: GammaPoint, raw: RawStatistics, var: VarianceComponents) -> Self {
        let degenerate = Degeneracy::of(&var);
        PointProfile {
            gamma,
            x_p: standardize(raw.t_p, var.i_ep, degenerate.p),
            x_o: standardize(raw.t_o, var.i_eo, degenerate.o),
            x_s: standardize(raw.t_s, var.i_es, degenerate.s),
            raw,
            var,
            degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreProfile {
    pub points: Vec<PointProfile>,
}

impl ScoreProfile {
    pub fn degenerate_count(&self) -> usize {
        self.points.iter().filter(|p| p.degenerate.any()).count()
    }

    pub fn floored_count(&self) -> usize {
        self.points.iter().filter(|p| p.var.floored).count()
    }
}

pub fn profile_point(ctx: &ScoreContext, dataset: &Dataset, gamma: GammaPoint, w: &WMatrix) -> Result<PointProfile> {
    let blocks = build_blocks(dataset, w)?;
    let raw = raw_statistics(&ctx.u, &ctx.v, &blocks);
    let var = variance_components(ctx, &blocks);
    Ok(PointProfile::new(gamma, raw, var))
}

/// Evaluate every grid point; the result keeps grid order.
pub fn compute_profile(ctx: &ScoreContext, dataset: &Dataset, grid: &NuisanceGrid) -> Result<ScoreProfile> {
    if grid.is_empty() {
        return Err(Error::Config("empty nuisance grid".into()));
    }
    let points = grid
        .points
        .par_iter()
        .map(|&g| profile_point(ctx, dataset, g, &w_matrix_q2(g)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreProfile { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupStatistics {
    pub s_o: f64,
    pub s_p: f64,
    pub s_s: f64,
    pub argmax_o: GammaPoint,
    pub argmax_p: GammaPoint,
    pub argmax_s: GammaPoint,
}

/// `max x²·1(x ≥ 0)` and the index of its first maximizer (0 if all negative).
pub fn one_sided_sup(xs: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let mut best = 0.0;
    let mut arg = None;
    for (i, x) in xs.into_iter().enumerate() {
        let v = if x >= 0.0 { x * x } else { 0.0 };
        if arg.is_none() || v > best {
            best = v;
            arg = Some(i);
        }
    }
    (best, arg.unwrap_or(0))
}

pub fn sup_statistics(profile: &ScoreProfile) -> Result<SupStatistics> {
    if profile.points.is_empty() {
        return Err(Error::Config("empty nuisance grid".into()));
    }
    let pts = &profile.points;
    let (s_o, io) = one_sided_sup(pts.iter().map(|p| p.x_o));
    let (s_p, ip) = one_sided_sup(pts.iter().map(|p| p.x_p));
    let (s_s, is) = one_sided_sup(pts.iter().map(|p| p.x_s));
    Ok(SupStatistics {
        s_o,
        s_p,
        s_s,
        argmax_o: pts[io].gamma,
        argmax_p: pts[ip].gamma,
        argmax_s: pts[is].gamma,
    })
}
