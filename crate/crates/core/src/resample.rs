//! Multiplier resampling of the supremum statistics conditional on the data.
//!
//! Each replicate multiplies the fixed per-pair terms `b Û_K Û_{K'}` and the
//! per-observation overdispersion terms by fresh standard normals, then
//! standardizes with the observed variances and takes the same one-sided
//! supremum over the same grid.
//!
//! Both replicate statistics are linear in `W(γ)`, so each replicate is
//! reduced to `q × q` coefficient arrays once and then contracted against
//! every grid point.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covparam::w_matrix_q2;
use crate::error::{Error, Result};
use crate::scorestats::{one_sided_sup, standardize, ScoreContext, ScoreProfile, SupStatistics};

/// Identifies the multiplier stream of one replicate.
///
/// Multipliers are generated per cluster from `(seed, replicate_index,
/// cluster)` and never stored, so replicates and clusters can be processed in
/// any order with identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicateDraws {
    pub seed: u64,
    pub replicate_index: u64,
}

impl ReplicateDraws {
    pub fn cluster_rng(&self, cluster: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replicate_index.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(cluster as u64);
        rng
    }
}

/// Source of multipliers for one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Multipliers {
    Normal(ReplicateDraws),
    /// Every multiplier equal to the given value.
    Constant(f64),
}

enum Stream {
    Normal(ChaCha8Rng),
    Constant(f64),
}

impl Stream {
    fn next(&mut self) -> f64 {
        match self {
            Stream::Normal(rng) => rng.sample(StandardNormal),
            Stream::Constant(c) => *c,
        }
    }
}

impl Multipliers {
    fn stream(&self, cluster: usize) -> Stream {
        match self {
            Multipliers::Normal(d) => Stream::Normal(d.cluster_rng(cluster)),
            Multipliers::Constant(c) => Stream::Constant(*c),
        }
    }
}

/// Replicate statistics collapsed to their `W`-linear coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateBasis {
    q: usize,
    /// `T_P^(r)(γ) = Σ_ab W_ab pair[a q + b]`.
    pair: Vec<f64>,
    /// `Σ_K v_KK z_Ka z_Kb (Û_K² − V̂_K)`.
    diag: Vec<f64>,
    /// `Σ_K v_KK F̂_K`.
    influence: DVector<f64>,
}

impl ReplicateBasis {
    pub fn build(ctx: &ScoreContext, mult: Multipliers) -> Self {
        let q = ctx.q;
        let mut pair = vec![0.0; q * q];
        let mut diag = vec![0.0; q * q];
        let mut influence = DVector::zeros(ctx.xi_dim());
        for (c, r) in ctx.ranges.iter().enumerate() {
            let mut stream = mult.stream(c);
            // Diagonal multipliers first, then one per unordered pair in
            // row-major order.
            for k in r.clone() {
                let v = stream.next();
                let resid = ctx.u[k] * ctx.u[k] - ctx.v[k];
                let zk = ctx.z_row(k);
                for a in 0..q {
                    for b in 0..q {
                        diag[a * q + b] += v * resid * zk[a] * zk[b];
                    }
                }
                influence.axpy(v, &ctx.influence[k], 1.0);
            }
            for j in r.clone() {
                let zj = ctx.z_row(j);
                for k in j + 1..r.end {
                    // One multiplier per unordered pair carries weight 2, the
                    // same law as √2 times independent multipliers on both
                    // ordered pairs.
                    let coef = 2.0 * stream.next() * ctx.u[j] * ctx.u[k];
                    let zk = ctx.z_row(k);
                    for a in 0..q {
                        for b in 0..q {
                            pair[a * q + b] += coef * zj[a] * zk[b];
                        }
                    }
                }
            }
        }
        ReplicateBasis {
            q,
            pair,
            diag,
            influence,
        }
    }

    /// `(T_P^(r), T_O^(r))` at a shape `w` (row-major `q × q`) with its `J_N`.
    pub fn evaluate(&self, w: &[f64], j_n: &DVector<f64>) -> (f64, f64) {
        let mut t_p = 0.0;
        let mut t_o = 0.0;
        for i in 0..self.q * self.q {
            t_p += w[i] * self.pair[i];
            t_o += w[i] * self.diag[i];
        }
        (t_p, t_o - j_n.dot(&self.influence))
    }
}

/// Row-major `W(γ)` for each profile point.
pub fn profile_shapes(profile: &ScoreProfile) -> Result<Vec<Vec<f64>>> {
    profile
        .points
        .iter()
        .map(|p| {
            let w = w_matrix_q2(p.gamma)?;
            let q = w.dim();
            Ok((0..q * q).map(|i| w.get(i / q, i % q)).collect())
        })
        .collect()
}

/// Raw replicate statistics `(T_P^(r)(γ), T_O^(r)(γ))` at every grid point.
pub fn replicate_raw(
    ctx: &ScoreContext,
    profile: &ScoreProfile,
    shapes: &[Vec<f64>],
    mult: Multipliers,
) -> Vec<(f64, f64)> {
    let basis = ReplicateBasis::build(ctx, mult);
    profile
        .points
        .iter()
        .zip(shapes)
        .map(|(p, w)| basis.evaluate(w, &p.var.j_n))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateSups {
    pub s_o: f64,
    pub s_p: f64,
    pub s_s: f64,
}

/// One resampled triple `(S_O^(r), S_P^(r), S_S^(r))`, standardized by the
/// observed variances and truncated the same way as the observed statistics.
pub fn replicate_statistics(
    ctx: &ScoreContext,
    profile: &ScoreProfile,
    shapes: &[Vec<f64>],
    mult: Multipliers,
) -> ReplicateSups {
    let raw = replicate_raw(ctx, profile, shapes, mult);
    let x = |f: &dyn Fn(&crate::scorestats::PointProfile, f64, f64) -> f64| {
        profile
            .points
            .iter()
            .zip(&raw)
            .map(move |(p, &(tp, to))| f(p, tp, to))
            .collect::<Vec<_>>()
    };
    let xo = x(&|p, _, to| standardize(to, p.var.i_eo, p.degenerate.o));
    let xp = x(&|p, tp, _| standardize(tp, p.var.i_ep, p.degenerate.p));
    let xs = x(&|p, tp, to| standardize(tp + to, p.var.i_es, p.degenerate.s));
    ReplicateSups {
        s_o: one_sided_sup(xo).0,
        s_p: one_sided_sup(xp).0,
        s_s: one_sided_sup(xs).0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullReplicates {
    pub r0: usize,
    pub s_o: Vec<f64>,
    pub s_p: Vec<f64>,
    pub s_s: Vec<f64>,
}

pub fn run_resampling(ctx: &ScoreContext, profile: &ScoreProfile, r0: usize, seed: u64) -> Result<NullReplicates> {
    if r0 == 0 {
        return Err(Error::Config("r0 must be at least 1".into()));
    }
    let shapes = profile_shapes(profile)?;
    let reps: Vec<ReplicateSups> = (0..r0)
        .into_par_iter()
        .map(|r| {
            let draws = ReplicateDraws {
                seed,
                replicate_index: r as u64,
            };
            replicate_statistics(ctx, profile, &shapes, Multipliers::Normal(draws))
        })
        .collect();
    Ok(NullReplicates {
        r0,
        s_o: reps.iter().map(|r| r.s_o).collect(),
        s_p: reps.iter().map(|r| r.s_p).collect(),
        s_s: reps.iter().map(|r| r.s_s).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PValues {
    pub p_o: f64,
    pub p_p: f64,
    pub p_s: f64,
}

/// `(1 + #{r : s^(r) ≥ s}) / (r0 + 1)`.
pub fn empirical_p(observed: f64, replicates: &[f64]) -> f64 {
    let exceed = replicates.iter().filter(|&&s| s >= observed).count();
    (1 + exceed) as f64 / (replicates.len() + 1) as f64
}

pub fn p_values(observed: &SupStatistics, reps: &NullReplicates) -> Result<PValues> {
    if reps.r0 == 0 || reps.s_s.is_empty() {
        return Err(Error::Config("no replicates".into()));
    }
    Ok(PValues {
        p_o: empirical_p(observed.s_o, &reps.s_o),
        p_p: empirical_p(observed.s_p, &reps.s_p),
        p_s: empirical_p(observed.s_s, &reps.s_s),
    })
}
