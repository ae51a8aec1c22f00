//! Spatial covariate rasters for the period models, standardized before entry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::AsciiGrid;

/// A covariate given either as one time-invariant raster or as one raster
/// per period.
#[derive(Debug, Clone)]
pub struct CovariateLayer {
    pub name: String,
    pub rasters: Vec<AsciiGrid>,
}

impl CovariateLayer {
    pub fn new(name: impl Into<String>, rasters: Vec<AsciiGrid>) -> Result<Self> {
        let name = name.into();
        if rasters.is_empty() {
            return Err(Error::Validation(format!("covariate '{name}' has no rasters")));
        }
        if rasters.iter().any(|r| !r.geometry.same_as(&rasters[0].geometry)) {
            return Err(Error::Validation(format!(
                "covariate '{name}' rasters have different geometries"
            )));
        }
        Ok(Self { name, rasters })
    }

    /// Raster used for period `p`.
    fn raster(&self, p: usize) -> &AsciiGrid {
        &self.rasters[if self.rasters.len() == 1 { 0 } else { p }]
    }

    pub fn is_time_varying(&self) -> bool {
        self.rasters.len() > 1
    }
}

/// z-score parameters of one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

/// Standardized covariate values at clusters and prediction cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDesign {
    pub names: Vec<String>,
    pub scaling: Vec<Standardization>,
    /// `[cluster][period][covariate]`
    pub cluster_values: Vec<Vec<Vec<f64>>>,
    /// `[period][cell][covariate]`; NaN where a raster has no data.
    pub cell_values: Vec<Vec<Vec<f64>>>,
}

impl CovariateDesign {
    /// Looks up every covariate at every cluster location for `n_periods`
    /// periods and at every cell of the study grid.
    ///
    /// Means and standard deviations are taken over all data cells of each
    /// covariate's rasters, so the scaling does not depend on which clusters
    /// are used for fitting.
    pub fn build(
        layers: &[CovariateLayer],
        locations: &[(u32, f64, f64)],
        n_periods: usize,
        grid_cells: usize,
    ) -> Result<Self> {
        let mut scaling = Vec::with_capacity(layers.len());
        for layer in layers {
            if layer.is_time_varying() && layer.rasters.len() != n_periods {
                return Err(Error::Validation(format!(
                    "covariate '{}' has {} rasters but the model has {n_periods} periods",
                    layer.name,
                    layer.rasters.len()
                )));
            }
            let vals: Vec<f64> = layer
                .rasters
                .iter()
                .flat_map(|r| r.values.iter().copied().filter(|v| v.is_finite()))
                .collect();
            if vals.len() < 2 {
                return Err(Error::Validation(format!("covariate '{}' has no data", layer.name)));
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            if !(var > 0.0) {
                return Err(Error::Validation(format!("covariate '{}' is constant", layer.name)));
            }
            scaling.push(Standardization { mean, sd: var.sqrt() });
        }

        let mut gaps = Vec::new();
        let mut cluster_values = Vec::with_capacity(locations.len());
        for &(id, lon, lat) in locations {
            let mut per_period = Vec::with_capacity(n_periods);
            for p in 0..n_periods {
                let mut row = Vec::with_capacity(layers.len());
                for (layer, s) in layers.iter().zip(&scaling) {
                    match layer.raster(p).value_at(lon, lat) {
                        Some(v) => row.push((v - s.mean) / s.sd),
                        None => {
                            gaps.push(format!(
                                "cluster {id} at ({lon}, {lat}): '{}' period {}",
                                layer.name,
                                p + 1
                            ));
                            row.push(f64::NAN);
                        }
                    }
                }
                per_period.push(row);
            }
            cluster_values.push(per_period);
        }
        if !gaps.is_empty() {
            return Err(Error::RasterGaps(gaps));
        }

        let mut cell_values = Vec::with_capacity(n_periods);
        for p in 0..n_periods {
            let mut cells = Vec::with_capacity(grid_cells);
            for cell in 0..grid_cells {
                cells.push(
                    layers
                        .iter()
                        .zip(&scaling)
                        .map(|(l, s)| l.raster(p).get(cell).map_or(f64::NAN, |v| (v - s.mean) / s.sd))
                        .collect(),
                );
            }
            cell_values.push(cells);
        }
        Ok(Self {
            names: layers.iter().map(|l| l.name.clone()).collect(),
            scaling,
            cluster_values,
            cell_values,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::GridGeometry;

    fn grid(values: Vec<f64>) -> AsciiGrid {
        let g = GridGeometry {
            ncols: 2,
            nrows: 2,
            xll: 0.0,
            yll: 0.0,
            cellsize: 1.0,
        };
        AsciiGrid::new(g, values).unwrap()
    }

    #[test]
    fn z_scores_and_lookup() {
        let layer = CovariateLayer::new("temp", vec![grid(vec![1.0, 2.0, 3.0, 4.0])]).unwrap();
        let d = CovariateDesign::build(&[layer], &[(7, 0.5, 1.5)], 3, 4).unwrap();
        let sd = (5.0f64 / 3.0).sqrt();
        // (0.5, 1.5) is the north-west cell, value 1
        assert!((d.cluster_values[0][2][0] - (1.0 - 2.5) / sd).abs() < 1e-12);
        assert_eq!(d.cell_values.len(), 3);
        let all: Vec<f64> = d.cell_values[0].iter().map(|c| c[0]).collect();
        assert!(all.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn gaps_are_listed() {
        let layer = CovariateLayer::new("pfpr", vec![grid(vec![f64::NAN, 2.0, 3.0, 4.0])]).unwrap();
        match CovariateDesign::build(&[layer], &[(1, 0.5, 1.5), (2, 1.5, 0.5), (3, 9.0, 9.0)], 1, 4) {
            Err(Error::RasterGaps(g)) => {
                assert_eq!(g.len(), 2);
                assert!(g[0].contains("cluster 1"));
                assert!(g[1].contains("cluster 3"));
            }
            other => panic!("expected gaps, got {other:?}"),
        }
    }

    #[test]
    fn period_count_must_match() {
        let layer = CovariateLayer::new("x", vec![grid(vec![1.0, 2.0, 3.0, 4.0]); 2]).unwrap();
        assert!(CovariateDesign::build(&[layer], &[], 3, 4).is_err());
    }
}
