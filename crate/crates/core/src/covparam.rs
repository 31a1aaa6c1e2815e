//! Normalized random-effect covariance shapes `W(γ)`, the nuisance grid, and
//! the per-cluster quadratic-form coefficients `b_{K,K'}(γ) = z_Kᵀ W(γ) z_{K'}`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Nuisance shape parameter for the two-dimensional covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl GammaPoint {
    pub fn new(gamma1: f64, gamma2: f64) -> Self {
        GammaPoint { gamma1, gamma2 }
    }
}

/// A symmetric positive semidefinite `q × q` covariance shape.
#[derive(Debug, Clone, PartialEq)]
pub struct WMatrix {
    entries: DMatrix<f64>,
}

impl WMatrix {
    /// Wrap a matrix after checking symmetry and positive semidefiniteness.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::Dimension("W must be a non-empty square matrix".into()));
        }
        let w = WMatrix { entries };
        let q = w.dim();
        let scale = w.entries.amax().max(1.0);
        for i in 0..q {
            for j in 0..i {
                if (w.entries[(i, j)] - w.entries[(j, i)]).abs() > 1e-14 * scale {
                    return Err(Error::Parameter("W is not symmetric".into()));
                }
            }
        }
        if w.min_eigenvalue() < -1e-12 * scale {
            return Err(Error::Parameter("W is not positive semidefinite".into()));
        }
        Ok(w)
    }

    pub fn zeros(q: usize) -> Self {
        WMatrix {
            entries: DMatrix::zeros(q, q),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.entries.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// `aᵀ W b`.
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        let q = self.dim();
        let mut s = 0.0;
        for i in 0..q {
            let mut row = 0.0;
            for j in 0..q {
                row += self.entries[(i, j)] * b[j];
            }
            s += a[i] * row;
        }
        s
    }
}

/// The two-dimensional shape
/// `[[cos²γ₁, γ₂ sinγ₁ cosγ₁], [γ₂ sinγ₁ cosγ₁, sin²γ₁]]`, trace one.
pub fn w_matrix_q2(g: GammaPoint) -> Result<WMatrix> {
    if !g.gamma1.is_finite() || !g.gamma2.is_finite() {
        return Err(Error::Parameter("gamma must be finite".into()));
    }
    if g.gamma2.abs() > 1.0 {
        return Err(Error::Parameter(format!(
            "|gamma2| must be at most 1, got {}",
            g.gamma2
        )));
    }
    let (s, c) = g.gamma1.sin_cos();
    let off = g.gamma2 * s * c;
    Ok(WMatrix {
        entries: DMatrix::from_row_slice(2, 2, &[c * c, off, off, s * s]),
    })
}

/// Unit-norm nonnegative diagonal from `q − 1` hyperspherical angles in `[0, π/2]`.
pub fn lambda_from_angles(angles: &[f64]) -> Result<Vec<f64>> {
    if let Some(a) = angles
        .iter()
        .find(|a| !(a.is_finite() && **a >= 0.0 && **a <= PI / 2.0))
    {
        return Err(Error::Parameter(format!("angle {a} outside [0, pi/2]")));
    }
    let q = angles.len() + 1;
    let mut lambda = Vec::with_capacity(q);
    let mut sin_prod = 1.0;
    for a in angles {
        let (s, c) = a.sin_cos();
        lambda.push(sin_prod * c);
        sin_prod *= s;
    }
    lambda.push(sin_prod);
    Ok(lambda)
}

/// General Cholesky form `W = ΛΓΓᵀΛ`.
///
/// `lambda_angles` has `q − 1` entries (see [`lambda_from_angles`]);
/// `lower_gamma` holds the strictly-lower entries of the unit lower-triangular
/// `Γ` in row-major order, `q(q − 1)/2` of them.
pub fn w_matrix_cholesky(lambda_angles: &[f64], lower_gamma: &[f64]) -> Result<WMatrix> {
    let lambda = lambda_from_angles(lambda_angles)?;
    let q = lambda.len();
    if lower_gamma.len() != q * (q - 1) / 2 {
        return Err(Error::Dimension(format!(
            "q = {q} needs {} lower-triangular entries, got {}",
            q * (q - 1) / 2,
            lower_gamma.len()
        )));
    }
    let mut gamma = DMatrix::<f64>::identity(q, q);
    let mut k = 0;
    for i in 1..q {
        for j in 0..i {
            gamma[(i, j)] = lower_gamma[k];
            k += 1;
        }
    }
    let l = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambda)) * gamma;
    let mut w = &l * l.transpose();
    // Exact symmetry.
    for i in 0..q {
        for j in 0..i {
            let v = 0.5 * (w[(i, j)] + w[(j, i)]);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    Ok(WMatrix { entries: w })
}

/// Grid resolution: `n1` values of γ₁ on `(0, π]`, `n2` (odd) values of γ₂ on
/// `[−δ₀, δ₀]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n1: usize,
    pub n2: usize,
    pub delta0: f64,
}

impl GridSpec {
    /// 20 × 31 with δ₀ = 15/16: the points `(iπ/20, j/16)`.
    pub fn full() -> Self {
        GridSpec {
            n1: 20,
            n2: 31,
            delta0: 15.0 / 16.0,
        }
    }

    /// 10 × 7 with δ₀ = 15/16, used for simulation runs.
    pub fn coarse() -> Self {
        GridSpec {
            n1: 10,
            n2: 7,
            delta0: 15.0 / 16.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 {
            return Err(Error::Config("grid n1 must be at least 1".into()));
        }
        if self.n2 == 0 || self.n2 % 2 == 0 {
            return Err(Error::Config(format!(
                "grid n2 must be a positive odd number, got {}",
                self.n2
            )));
        }
        if !(self.delta0 > 0.0 && self.delta0 < 1.0) {
            return Err(Error::Config(format!(
                "grid delta0 must lie in (0, 1), got {}",
                self.delta0
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for GridSpec {
    type Err = Error;

    /// Parses `n1,n2,delta0`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("grid must be 'n1,n2,delta0', got '{s}'"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let spec = GridSpec {
            n1: parts[0].parse().map_err(|_| bad())?,
            n2: parts[1].parse().map_err(|_| bad())?,
            delta0: parts[2].parse().map_err(|_| bad())?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Grid points in row-major order (γ₁ outer, γ₂ inner).
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceGrid {
    pub spec: GridSpec,
    pub points: Vec<GammaPoint>,
}

impl NuisanceGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Only the points with γ₂ = 0 (no correlation between random effects).
    pub fn uncorrelated(&self) -> NuisanceGrid {
        NuisanceGrid {
            spec: self.spec,
            points: self
                .points
                .iter()
                .filter(|g| g.gamma2 == 0.0)
                .copied()
                .collect(),
        }
    }

    pub fn w_matrices(&self) -> Result<Vec<WMatrix>> {
        self.points.iter().map(|&g| w_matrix_q2(g)).collect()
    }
}

pub fn make_grid(spec: GridSpec) -> Result<NuisanceGrid> {
    spec.validate()?;
    let half = (spec.n2 - 1) / 2;
    let step2 = if half == 0 { 0.0 } else { spec.delta0 / half as f64 };
    let mut points = Vec::with_capacity(spec.n1 * spec.n2);
    for i in 1..=spec.n1 {
        let g1 = i as f64 * PI / spec.n1 as f64;
        for j in -(half as i64)..=(half as i64) {
            points.push(GammaPoint::new(g1, j as f64 * step2));
        }
    }
    Ok(NuisanceGrid { spec, points })
}

/// Per-cluster dense blocks of `b_{K,K'}(γ)`; entries across clusters are zero
/// and never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCoefficients {
    blocks: Vec<Vec<f64>>,
    sizes: Vec<usize>,
}

impl BlockCoefficients {
    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn size(&self, cluster: usize) -> usize {
        self.sizes[cluster]
    }

    pub fn get(&self, cluster: usize, j: usize, k: usize) -> f64 {
        self.blocks[cluster][j * self.sizes[cluster] + k]
    }

    /// Row-major `m × m` block of one cluster.
    pub fn block(&self, cluster: usize) -> &[f64] {
        &self.blocks[cluster]
    }

    pub fn stored_len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

pub fn build_blocks(dataset: &Dataset, w: &WMatrix) -> Result<BlockCoefficients> {
    if dataset.q() != w.dim() {
        return Err(Error::Dimension(format!(
            "random-effect covariates have length {}, W is {}x{}",
            dataset.q(),
            w.dim(),
            w.dim()
        )));
    }
    let mut blocks = Vec::with_capacity(dataset.n_clusters());
    let mut sizes = Vec::with_capacity(dataset.n_clusters());
    for c in dataset.clusters() {
        let m = c.observations.len();
        let mut b = vec![0.0; m * m];
        for j in 0..m {
            for k in j..m {
                let v = w.bilinear(&c.observations[j].z, &c.observations[k].z);
                b[j * m + k] = v;
                b[k * m + j] = v;
            }
        }
        blocks.push(b);
        sizes.push(m);
    }
    Ok(BlockCoefficients { blocks, sizes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, Observation};
    use proptest::prelude::*;

    fn close(a: &DMatrix<f64>, b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15)
            && a.nrows() * a.ncols() == b.len()
    }

    #[test]
    fn q2_examples() {
        let w = w_matrix_q2(GammaPoint::new(PI / 2.0, 0.7)).unwrap();
        // column-major storage is irrelevant for symmetric matrices
        assert!(close(w.matrix(), &[0.0, 0.0, 0.0, 1.0]));
        let w = w_matrix_q2(GammaPoint::new(PI / 4.0, 0.0)).unwrap();
        assert!(close(w.matrix(), &[0.5, 0.0, 0.0, 0.5]));
        let w = w_matrix_q2(GammaPoint::new(PI / 4.0, 0.5)).unwrap();
        assert!(close(w.matrix(), &[0.5, 0.25, 0.25, 0.5]));
        assert!(w_matrix_q2(GammaPoint::new(1.0, 1.01)).is_err());
    }

    #[test]
    fn q2_boundary_is_rank_one() {
        for &g1 in &[0.3, 1.0, 2.5] {
            for &g2 in &[-1.0, 1.0] {
                let w = w_matrix_q2(GammaPoint::new(g1, g2)).unwrap();
                assert!(w.matrix().determinant().abs() < 1e-14);
                assert!((w.trace() - 1.0).abs() < 1e-15);
            }
        }
        let w = w_matrix_q2(GammaPoint::new(PI, 0.3)).unwrap();
        assert!((w.get(0, 0) - 1.0).abs() < 1e-15 && w.get(1, 1) < 1e-30);
    }

    #[test]
    fn cholesky_examples() {
        let w = w_matrix_cholesky(&[0.0], &[0.0]).unwrap();
        assert!(close(w.matrix(), &[1.0, 0.0, 0.0, 0.0]));
        let w = w_matrix_cholesky(&[PI / 4.0], &[0.0]).unwrap();
        assert!((w.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((w.get(1, 1) - 0.5).abs() < 1e-15);
        assert!(w.get(0, 1).abs() < 1e-15);
        assert!(w_matrix_cholesky(&[0.1, 0.2], &[0.0]).is_err());
        assert!(w_matrix_cholesky(&[2.0], &[0.0]).is_err());
    }

    #[test]
    fn cholesky_q3_matches_explicit_product() {
        let angles = [0.4, 1.1];
        let lower = [1.0, -0.5, 0.3];
        let w = w_matrix_cholesky(&angles, &lower).unwrap();
        let lam = lambda_from_angles(&angles).unwrap();
        assert!((lam.iter().map(|l| l * l).sum::<f64>() - 1.0).abs() < 1e-15);
        let g = [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [-0.5, 0.3, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += lam[i] * g[i][k] * g[j][k] * lam[j];
                }
                assert!((w.get(i, j) - s).abs() < 1e-15, "({i},{j})");
            }
        }
        assert!((w.get(0, 0) - lam[0] * lam[0]).abs() < 1e-15);
        assert!((w.get(1, 0) - lam[0] * lam[1]).abs() < 1e-15);
        assert!(w.min_eigenvalue() > -1e-12);
    }

    #[test]
    fn grid_examples() {
        let g = make_grid(GridSpec::full()).unwrap();
        assert_eq!(g.len(), 620);
        assert!((g.points[0].gamma1 - PI / 20.0).abs() < 1e-15);
        assert!((g.points[0].gamma2 + 15.0 / 16.0).abs() < 1e-15);
        assert!((g.points[1].gamma2 + 14.0 / 16.0).abs() < 1e-15);
        assert_eq!(g.points[15].gamma2, 0.0);
        let single = make_grid(GridSpec { n1: 1, n2: 1, delta0: 0.5 }).unwrap();
        assert_eq!(single.points, vec![GammaPoint::new(PI, 0.0)]);
        let coarse = make_grid(GridSpec { n1: 10, n2: 7, delta0: 15.0 / 16.0 }).unwrap();
        assert_eq!(coarse.len(), 70);
        assert_eq!(coarse.uncorrelated().len(), 10);
    }

    #[test]
    fn grid_rejects_bad_specs() {
        for spec in [
            GridSpec { n1: 0, n2: 3, delta0: 0.5 },
            GridSpec { n1: 3, n2: 4, delta0: 0.5 },
            GridSpec { n1: 3, n2: 3, delta0: 1.0 },
            GridSpec { n1: 3, n2: 3, delta0: 0.0 },
        ] {
            assert!(make_grid(spec).is_err(), "{spec:?}");
        }
        assert_eq!("10,7,0.9375".parse::<GridSpec>().unwrap(), GridSpec::coarse());
        assert!("10,7".parse::<GridSpec>().is_err());
    }

    fn obs(z: Vec<f64>) -> Observation {
        Observation::new(0.0, vec![1.0], z)
    }

    fn dataset(clusters: Vec<Vec<Vec<f64>>>) -> Dataset {
        Dataset::new(
            clusters
                .into_iter()
                .enumerate()
                .map(|(i, zs)| Cluster {
                    id: i.to_string(),
                    observations: zs.into_iter().map(obs).collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn block_examples() {
        let d = dataset(vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]]]);
        let w = w_matrix_q2(GammaPoint::new(PI / 4.0, 0.5)).unwrap();
        let b = build_blocks(&d, &w).unwrap();
        assert!(b.block(0).iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let b0 = build_blocks(&d, &WMatrix::zeros(2)).unwrap();
        assert!(b0.block(0).iter().all(|&v| v == 0.0));

        let d = dataset(vec![
            vec![vec![1.0, 0.2], vec![1.0, -0.4], vec![1.0, 0.9]],
            vec![vec![1.0, 1.0], vec![1.0, 0.0]],
        ]);
        let b = build_blocks(&d, &w).unwrap();
        assert_eq!(b.stored_len(), 9 + 4);
        assert!(build_blocks(&d, &WMatrix::zeros(3)).is_err());
    }

    proptest! {
        #[test]
        fn every_grid_point_is_psd(n1 in 1usize..12, h in 0usize..6, d0 in 0.01f64..0.99) {
            let grid = make_grid(GridSpec { n1, n2: 2 * h + 1, delta0: d0 }).unwrap();
            for w in grid.w_matrices().unwrap() {
                let det = w.matrix().determinant();
                prop_assert!(det >= -1e-15);
                prop_assert!(w.min_eigenvalue() >= -1e-12);
                prop_assert!((w.trace() - 1.0).abs() < 1e-14);
            }
        }

        #[test]
        fn blocks_permute_with_observations(
            zs in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 2..6),
            g1 in 0.01f64..PI, g2 in -0.99f64..0.99, rot in 0usize..5,
        ) {
            let m = zs.len();
            let rows: Vec<Vec<f64>> = zs.iter().map(|&(a, b)| vec![a, b]).collect();
            let perm: Vec<usize> = (0..m).map(|i| (i + rot) % m).collect();
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let w = w_matrix_q2(GammaPoint::new(g1, g2)).unwrap();
            let b = build_blocks(&dataset(vec![rows]), &w).unwrap();
            let bp = build_blocks(&dataset(vec![permuted]), &w).unwrap();
            for j in 0..m {
                prop_assert!(b.get(0, j, j) >= -1e-15);
                for k in 0..m {
                    prop_assert!((bp.get(0, j, k) - b.get(0, perm[j], perm[k])).abs() < 1e-14);
                    prop_assert_eq!(b.get(0, j, k), b.get(0, k, j));
                }
            }
        }
    }
}
