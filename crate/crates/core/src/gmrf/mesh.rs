//! Regular-grid discretization of the Matérn SPDE.
//!
//! Nodes sit at cell centers of a rectangular lon/lat grid. With lumped mass
//! `C = h^2 I` and the five-point stiffness `G` (Neumann boundary), the
//! `alpha = 2` SPDE `(kappa^2 - Δ) x = W / tau` gives the precision
//! `Q = tau^2 (kappa^2 C + G) C^{-1} (kappa^2 C + G)`, a Matérn field with
//! smoothness 1, range `sqrt(8) / kappa` and variance
//! `1 / (4 pi kappa^2 tau^2)`.

use serde::{Deserialize, Serialize};

use super::precision::SparsePrecisionBlock;
use super::sparse::CscMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMesh {
    nx: usize,
    ny: usize,
    /// Center of node (0, 0).
    x0: f64,
    y0: f64,
    h: f64,
}

impl SpatialMesh {
    pub fn new(nx: usize, ny: usize, x0: f64, y0: f64, h: f64) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::Gmrf(format!("mesh must be at least 3x3, got {nx}x{ny}")));
        }
        if !(h > 0.0 && h.is_finite()) || !x0.is_finite() || !y0.is_finite() {
            return Err(Error::Gmrf(format!("degenerate mesh spacing {h}")));
        }
        Ok(Self { nx, ny, x0, y0, h })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.x0, self.y0)
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    /// Node index of grid position `(ix, iy)`; `iy` grows northwards.
    pub fn node(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn position(&self, node: usize) -> (usize, usize) {
        (node % self.nx, node / self.nx)
    }

    pub fn center(&self, node: usize) -> (f64, f64) {
        let (ix, iy) = self.position(node);
        (self.x0 + ix as f64 * self.h, self.y0 + iy as f64 * self.h)
    }

    pub fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.n_nodes()).map(|k| self.center(k)).collect()
    }

    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    /// Diagonal of the lumped mass matrix.
    pub fn mass(&self) -> Vec<f64> {
        vec![self.cell_area(); self.n_nodes()]
    }

    /// Five-point stiffness with Neumann boundary: diagonal holds the number
    /// of neighbours, off-diagonals are `-1`.
    pub fn stiffness(&self) -> CscMatrix {
        let mut trip = Vec::with_capacity(5 * self.n_nodes());
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let k = self.node(ix, iy);
                let mut deg = 0.0;
                let mut link = |other: usize| {
                    trip.push((k, other, -1.0));
                    deg += 1.0;
                };
                if ix > 0 {
                    link(self.node(ix - 1, iy));
                }
                if ix + 1 < self.nx {
                    link(self.node(ix + 1, iy));
                }
                if iy > 0 {
                    link(self.node(ix, iy - 1));
                }
                if iy + 1 < self.ny {
                    link(self.node(ix, iy + 1));
                }
                trip.push((k, k, deg));
            }
        }
        CscMatrix::from_triplets(self.n_nodes(), self.n_nodes(), &trip)
    }

    /// Bilinear interpolation weights of the field at `(lon, lat)` over the
    /// surrounding nodes. Points beyond the outermost centers are clamped to
    /// the boundary.
    pub fn interpolation_weights(&self, lon: f64, lat: f64) -> Result<Vec<(usize, f64)>> {
        let fx = (lon - self.x0) / self.h;
        let fy = (lat - self.y0) / self.h;
        let tol = 0.5 + 1e-9;
        if !(fx >= -tol && fy >= -tol && fx <= (self.nx - 1) as f64 + tol && fy <= (self.ny - 1) as f64 + tol)
        {
            return Err(Error::Gmrf(format!("location ({lon}, {lat}) lies outside the mesh")));
        }
        let fx = fx.clamp(0.0, (self.nx - 1) as f64);
        let fy = fy.clamp(0.0, (self.ny - 1) as f64);
        let ix = (fx.floor() as usize).min(self.nx - 2);
        let iy = (fy.floor() as usize).min(self.ny - 2);
        let (ax, ay) = (fx - ix as f64, fy - iy as f64);
        let mut out = Vec::with_capacity(4);
        for (dx, dy, w) in [
            (0, 0, (1.0 - ax) * (1.0 - ay)),
            (1, 0, ax * (1.0 - ay)),
            (0, 1, (1.0 - ax) * ay),
            (1, 1, ax * ay),
        ] {
            if w > 0.0 {
                out.push((self.node(ix + dx, iy + dy), w));
            }
        }
        Ok(out)
    }

    /// The three fixed matrices whose combination gives the SPDE precision:
    /// `Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)`.
    pub fn spde_components(&self) -> SpdeComponents {
        let g = self.stiffness();
        let area = self.cell_area();
        let c = CscMatrix::diagonal(&self.mass());
        let g_cinv_g = g.matmul(&g).scaled(1.0 / area);
        SpdeComponents { c, g, g_cinv_g }
    }
}

#[derive(Debug, Clone)]
pub struct SpdeComponents {
    pub c: CscMatrix,
    pub g: CscMatrix,
    pub g_cinv_g: CscMatrix,
}

/// Parameters of the Matérn field in interpretable units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    pub range: f64,
    pub sigma: f64,
}

impl MaternParams {
    pub fn kappa(&self) -> f64 {
        8f64.sqrt() / self.range
    }

    pub fn tau2(&self) -> f64 {
        let k = self.kappa();
        1.0 / (4.0 * std::f64::consts::PI * k * k * self.sigma * self.sigma)
    }

    /// Coefficients of `(C, G, G C^{-1} G)` in the precision.
    pub fn coefficients(&self) -> [f64; 3] {
        let k2 = self.kappa().powi(2);
        let t2 = self.tau2();
        [t2 * k2 * k2, 2.0 * t2 * k2, t2]
    }

    fn validate(&self) -> Result<()> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::Domain(format!("spatial range must be positive, got {}", self.range)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!("spatial sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

impl SpdeComponents {
    pub fn precision(&self, p: MaternParams) -> Result<CscMatrix> {
        p.validate()?;
        let [a, b, c] = p.coefficients();
        self.c.scaled(a).add(&self.g.scaled(b))?.add(&self.g_cinv_g.scaled(c))
    }
}

pub fn spde_matern_precision(mesh: &SpatialMesh, range: f64, sigma: f64) -> Result<SparsePrecisionBlock> {
    let matrix = mesh.spde_components().precision(MaternParams { range, sigma })?;
    Ok(SparsePrecisionBlock {
        matrix,
        rank_deficiency: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::testing::{dense_inverse, min_eigenvalue};

    #[test]
    fn stiffness_is_a_neumann_laplacian() {
        let mesh = SpatialMesh::new(4, 3, 0.0, 0.0, 0.5).unwrap();
        let g = mesh.stiffness();
        assert!(g.asymmetry() == 0.0);
        let ones = vec![1.0; mesh.n_nodes()];
        assert!(g.mul_vec(&ones).iter().all(|v| v.abs() < 1e-15));
        assert!(min_eigenvalue(&g) > -1e-10);
        assert_eq!(g.get(0, 0), 2.0);
        assert_eq!(g.get(mesh.node(1, 1), mesh.node(1, 1)), 4.0);
    }

    #[test]
    fn rejects_degenerate_meshes() {
        assert!(SpatialMesh::new(2, 5, 0.0, 0.0, 1.0).is_err());
        assert!(SpatialMesh::new(5, 5, 0.0, 0.0, 0.0).is_err());
        let mesh = SpatialMesh::new(5, 5, 0.0, 0.0, 1.0).unwrap();
        assert!(spde_matern_precision(&mesh, -1.0, 1.0).is_err());
    }

    #[test]
    fn sigma_scaling_is_exact() {
        let mesh = SpatialMesh::new(5, 4, 0.0, 0.0, 0.1).unwrap();
        let a = spde_matern_precision(&mesh, 0.3, 1.0).unwrap().matrix;
        let b = spde_matern_precision(&mesh, 0.3, 2.0).unwrap().matrix;
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x / 4.0 - y).abs() < 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn bilinear_weights_reproduce_linear_functions() {
        let mesh = SpatialMesh::new(5, 6, 10.0, -2.0, 0.25).unwrap();
        let f = |(x, y): (f64, f64)| 2.0 * x - 3.0 * y + 1.0;
        for &(lon, lat) in &[(10.1, -1.9), (10.9, -0.8), (10.0, -2.0), (11.0, -0.75)] {
            let w = mesh.interpolation_weights(lon, lat).unwrap();
            let total: f64 = w.iter().map(|p| p.1).sum();
            let value: f64 = w.iter().map(|&(k, wk)| wk * f(mesh.center(k))).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((value - f((lon, lat))).abs() < 1e-10);
        }
        assert!(mesh.interpolation_weights(0.0, 0.0).is_err());
    }

    // Variance and correlation checks against the continuous Matérn field.
    #[test]
    fn interior_marginal_variance_is_close_to_sigma_squared() {
        let mesh = SpatialMesh::new(40, 40, 0.0, 0.0, 0.05).unwrap();
        let sigma = 0.8;
        let q = spde_matern_precision(&mesh, 0.5, sigma).unwrap().matrix;
        let f = crate::gmrf::CholeskyFactor::new(&q).unwrap();
        let centre = mesh.node(20, 20);
        let mut e = vec![0.0; mesh.n_nodes()];
        e[centre] = 1.0;
        let col = f.solve(&e);
        let var = col[centre];
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.15, "variance {var}");
        // Matérn nu = 1 correlation at the range is about 0.14
        let at_range = mesh.node(30, 20);
        let corr = col[at_range] / var.sqrt() / col_variance(&f, at_range, mesh.n_nodes()).sqrt();
        assert!((corr - 0.14).abs() < 0.05, "correlation {corr}");
    }

    fn col_variance(f: &crate::gmrf::CholeskyFactor, k: usize, n: usize) -> f64 {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        f.solve(&e)[k]
    }

    #[test]
    fn small_precision_is_positive_definite() {
        let mesh = SpatialMesh::new(4, 4, 0.0, 0.0, 1.0).unwrap();
        let q = spde_matern_precision(&mesh, 3.0, 1.0).unwrap().matrix;
        assert!(q.asymmetry() < 1e-12);
        assert!(min_eigenvalue(&q) > 0.0);
        let inv = dense_inverse(&q);
        assert!(inv[5][5] > 0.0);
    }
}
