//! Small synthetic model inputs shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::covariates::CovariateLayer;
use super::offset::BiasOffsetTable;
use super::spec::{ModelData, ModelSpec, SpecConfig, SpecInputs, Variant};
use crate::gmrf::{AsciiGrid, GridGeometry, StudyDomain};
use crate::survey::{Cluster, ExposureCell, ExposureTable};

pub fn geometry() -> GridGeometry {
    GridGeometry {
        ncols: 3,
        nrows: 3,
        xll: 0.0,
        yll: 0.0,
        cellsize: 1.0,
    }
}

pub fn density() -> AsciiGrid {
    AsciiGrid::new(geometry(), (0..9).map(|i| 1.0 + i as f64 * 0.25).collect()).unwrap()
}

/// Random clusters over two surveys with tallies in 2000..=2009.
pub fn table(n_clusters: usize, seed: u64) -> ExposureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters = Vec::new();
    let mut cells = Vec::new();
    for c in 0..n_clusters {
        clusters.push(Cluster {
            cluster_id: c as u32 + 1,
            survey_id: 1 + (c % 2) as u32,
            stratum_id: (c % 2) as u32,
            lon: rng.random_range(0.05..2.95),
            lat: rng.random_range(0.05..2.95),
            weight: 1.0,
            province: 1 + (c % 3) as u32,
            area: 1,
            urban: c % 3 == 0,
        });
        for year in 2000..=2009 {
            for band in 0..6 {
                if rng.random_bool(0.3) {
                    continue;
                }
                let exposure = rng.random_range(5..40u32);
                let p = [0.03, 0.005, 0.002, 0.001, 0.001, 0.001][band] * 3.0;
                let deaths = (0..exposure).filter(|_| rng.random_bool(p)).count() as u32;
                cells.push(ExposureCell {
                    cluster: c,
                    year,
                    band,
                    deaths,
                    exposure,
                });
            }
        }
    }
    ExposureTable { clusters, cells }
}

pub fn config(variant: Variant) -> SpecConfig {
    SpecConfig {
        variant,
        year_first: Some(2000),
        year_last: Some(2010),
        forecast_to: 2010,
        knot_step: 5,
        periods: crate::survey::YearRange::bins(2000, 2009, 5),
        ..SpecConfig::default()
    }
}

pub fn covariate(name: &str, seed: u64) -> CovariateLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..9).map(|_| rng.random_range(0.0..10.0)).collect();
    CovariateLayer::new(name, vec![AsciiGrid::new(geometry(), values).unwrap()]).unwrap()
}

pub fn build_with(
    variant: Variant,
    table: &ExposureTable,
    offsets: BiasOffsetTable,
    covariates: &[CovariateLayer],
) -> (ModelSpec, ModelData) {
    let dens = density();
    ModelSpec::build(
        &config(variant),
        SpecInputs {
            domain: StudyDomain::new(geometry(), 1).unwrap(),
            density: &dens,
            table,
            offsets,
            covariates,
        },
    )
    .unwrap()
}

pub fn build(variant: Variant, n_clusters: usize, seed: u64) -> (ModelSpec, ModelData) {
    let covs = if variant.has_covariates() {
        vec![covariate("temp", seed + 100)]
    } else {
        vec![]
    };
    build_with(variant, &table(n_clusters, seed), BiasOffsetTable::new(), &covs)
}

/// Random latent vector of moderate size.
pub fn random_latent(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}
