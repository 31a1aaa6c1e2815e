use super::{link_mean, score_terms, FamilyKind, FamilySpec, MomentSet};

/// Moments of `(U, V)` by direct integration of the score terms.
///
/// Discrete families enumerate `y = 0..=trials` with binomial probabilities;
/// gaussian uses 64-point Gauss–Hermite quadrature against `N(μ, 1/φ)`. Every
/// moment is computed from [`score_terms`] evaluated on the support, with no
/// reference to cumulant formulas.
pub fn moment_oracle(family: FamilySpec, eta: f64, phi: f64) -> MomentSet {
    let support = support_points(family, eta, phi);
    let mut m = Accum::default();
    for &(y, w) in &support {
        let s = score_terms(family, y, eta, phi).expect("support point");
        m.add(w, s.u, s.v);
    }
    let r_mean = m.eu2 - m.ev;
    let (mut var, mut cov) = (0.0, 0.0);
    for &(y, w) in &support {
        let s = score_terms(family, y, eta, phi).expect("support point");
        let d = s.u * s.u - s.v - r_mean;
        var += w * d * d;
        cov += w * d * s.u;
    }
    let slope = cov / m.eu2;
    let mut resid = 0.0;
    for &(y, w) in &support {
        let s = score_terms(family, y, eta, phi).expect("support point");
        let d = s.u * s.u - s.v - r_mean - slope * s.u;
        resid += w * d * d;
    }
    MomentSet {
        eu2: m.eu2,
        eu4: m.eu4,
        ev2: m.ev2,
        eu2v: m.eu2v,
        var_u2_minus_v: var,
        resid_u2_minus_v: resid,
    }
}

/// `E[U]` and `E[U² − V]` under the oracle distribution.
pub fn oracle_score_means(family: FamilySpec, eta: f64, phi: f64) -> (f64, f64) {
    let mut eu = 0.0;
    let mut er = 0.0;
    for (y, w) in support_points(family, eta, phi) {
        let s = score_terms(family, y, eta, phi).expect("support point");
        eu += w * s.u;
        er += w * (s.u * s.u - s.v);
    }
    (eu, er)
}

#[derive(Default)]
struct Accum {
    eu2: f64,
    eu4: f64,
    ev: f64,
    ev2: f64,
    eu2v: f64,
}

impl Accum {
    fn add(&mut self, w: f64, u: f64, v: f64) {
        let u2 = u * u;
        self.eu2 += w * u2;
        self.eu4 += w * u2 * u2;
        self.ev += w * v;
        self.ev2 += w * v * v;
        self.eu2v += w * u2 * v;
    }
}

/// Weighted support `(y, P(y))` of the response at `η`.
pub(crate) fn support_points(family: FamilySpec, eta: f64, phi: f64) -> Vec<(f64, f64)> {
    match family.kind() {
        FamilyKind::Gaussian => {
            let mu = link_mean(family, eta).expect("finite eta");
            let sd = (1.0 / phi).sqrt();
            gauss_hermite_normal(64)
                .into_iter()
                .map(|(z, w)| (mu + sd * z, w))
                .collect()
        }
        _ => {
            let n = family.trials();
            let p = link_mean(family, eta).expect("finite eta") / n as f64;
            (0..=n)
                .map(|k| (k as f64, binomial_pmf(n, k, p)))
                .collect()
        }
    }
}

fn binomial_pmf(n: u32, k: u32, p: f64) -> f64 {
    let mut coef = 1.0;
    for i in 0..k {
        coef *= (n - i) as f64 / (i + 1) as f64;
    }
    coef * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Nodes and weights for `E f(Z)`, `Z ~ N(0, 1)`.
///
/// Physicists' Hermite roots by Newton iteration on the orthonormal
/// recurrence, then rescaled by `√2` and `π^{-1/2}`.
pub(crate) fn gauss_hermite_normal(n: usize) -> Vec<(f64, f64)> {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let scale = std::f64::consts::PI.sqrt().recip();
    x.into_iter()
        .zip(w)
        .map(|(xi, wi)| (std::f64::consts::SQRT_2 * xi, wi * scale))
        .collect()
}
