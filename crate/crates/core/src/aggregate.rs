//! Population-weighted aggregation of U5MR surfaces to administrative
//! regions, and summaries used for reporting progress.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{AsciiGrid, GridGeometry};
use crate::io::{read_to_string, write_csv};
use crate::model::SurfaceSamples;

#[derive(Debug, Deserialize)]
struct FeatureCollection {
    features: Vec<Feature>,
}

#[derive(Debug, Deserialize)]
struct Feature {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    properties: serde_json::Map<String, serde_json::Value>,
    geometry: Geometry,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", content = "coordinates")]
enum Geometry {
    Polygon(Vec<Vec<[f64; 2]>>),
    MultiPolygon(Vec<Vec<Vec<[f64; 2]>>>),
}

/// One polygon as outer ring plus holes.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub rings: Vec<Vec<[f64; 2]>>,
}

impl Polygon {
    /// Even-odd ray casting over all rings, so holes are excluded.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in &self.rings {
            let n = ring.len();
            if n < 3 {
                continue;
            }
            let mut j = n - 1;
            for i in 0..n {
                let [xi, yi] = ring[i];
                let [xj, yj] = ring[j];
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
        }
        inside
    }
}

/// Regions and the assignment of grid cells to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub ids: Vec<String>,
    /// Region index of each grid cell, `None` outside every region.
    pub cell_region: Vec<Option<usize>>,
}

impl RegionSet {
    /// Assigns cells by testing their centers; a center on a shared
    /// boundary goes to the first region listed.
    pub fn from_polygons(grid: &GridGeometry, regions: &[(String, Vec<Polygon>)]) -> Result<Self> {
        let mut ids: Vec<String> = regions.iter().map(|r| r.0.clone()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != regions.len() {
            return Err(Error::Aggregate("region ids must be unique".into()));
        }
        let cell_region = grid
            .cell_centers()
            .into_iter()
            .map(|(x, y)| regions.iter().position(|(_, polys)| polys.iter().any(|p| p.contains(x, y))))
            .collect();
        Self::from_assignment(regions.iter().map(|r| r.0.clone()).collect(), cell_region)
    }

    pub fn from_assignment(ids: Vec<String>, cell_region: Vec<Option<usize>>) -> Result<Self> {
        let mut used = vec![0usize; ids.len()];
        for r in cell_region.iter().flatten() {
            if *r >= ids.len() {
                return Err(Error::Aggregate(format!("cell assigned to unknown region index {r}")));
            }
            used[*r] += 1;
        }
        let empty: Vec<&str> = ids.iter().zip(&used).filter(|(_, &n)| n == 0).map(|(s, _)| s.as_str()).collect();
        if !empty.is_empty() {
            return Err(Error::Aggregate(format!("regions contain no grid cell centers: {empty:?}")));
        }
        Ok(Self { ids, cell_region })
    }

    /// Parses a GeoJSON feature collection of polygons; each feature's id
    /// is its `id` property, falling back to the feature id.
    pub fn from_geojson(text: &str, grid: &GridGeometry) -> Result<Self> {
        let fc: FeatureCollection =
            serde_json::from_str(text).map_err(|e| Error::Aggregate(format!("invalid region GeoJSON: {e}")))?;
        let mut regions = Vec::with_capacity(fc.features.len());
        for (k, f) in fc.features.into_iter().enumerate() {
            let id = f
                .properties
                .get("id")
                .or(f.id.as_ref())
                .map(|v| match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .ok_or_else(|| Error::Aggregate(format!("feature {k} has no id property")))?;
            let polys = match f.geometry {
                Geometry::Polygon(rings) => vec![Polygon { rings }],
                Geometry::MultiPolygon(ps) => ps.into_iter().map(|rings| Polygon { rings }).collect(),
            };
            regions.push((id, polys));
        }
        Self::from_polygons(grid, &regions)
    }

    pub fn read_geojson(path: &Path, grid: &GridGeometry) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInputs(vec![path.to_path_buf()]));
        }
        Self::from_geojson(&read_to_string(path)?, grid)
    }

    /// GeoJSON with one square polygon per cell block of each region, for
    /// regions that are unions of grid cells.
    pub fn to_geojson(&self, grid: &GridGeometry) -> String {
        let features: Vec<serde_json::Value> = self
            .ids
            .iter()
            .enumerate()
            .map(|(r, id)| {
                let polys: Vec<serde_json::Value> = self
                    .cell_region
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| **a == Some(r))
                    .map(|(cell, _)| {
                        let (cx, cy) = grid.cell_center(cell);
                        let h = 0.5 * grid.cellsize;
                        serde_json::json!([[
                            [cx - h, cy - h],
                            [cx + h, cy - h],
                            [cx + h, cy + h],
                            [cx - h, cy + h],
                            [cx - h, cy - h]
                        ]])
                    })
                    .collect();
                serde_json::json!({
                    "type": "Feature",
                    "properties": {"id": id},
                    "geometry": {"type": "MultiPolygon", "coordinates": polys}
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({"type": "FeatureCollection", "features": features}))
            .expect("serializable")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// A single region covering every assigned cell.
    pub fn national(&self, id: &str) -> Self {
        Self {
            ids: vec![id.to_string()],
            cell_region: self.cell_region.iter().map(|r| r.map(|_| 0)).collect(),
        }
    }

    /// Cells with positive density in each region, with their weights.
    fn weights(&self, density: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
        if density.len() != self.cell_region.len() {
            return Err(Error::Aggregate(format!(
                "density has {} cells but the regions cover {}",
                density.len(),
                self.cell_region.len()
            )));
        }
        let mut out = vec![Vec::new(); self.len()];
        for (cell, r) in self.cell_region.iter().enumerate() {
            if let Some(r) = r {
                let d = density[cell];
                if d.is_finite() && d > 0.0 {
                    out[*r].push((cell, d));
                }
            }
        }
        for (r, w) in out.iter_mut().enumerate() {
            let total: f64 = w.iter().map(|p| p.1).sum();
            if !(total > 0.0) {
                return Err(Error::Aggregate(format!("region {} has zero total population density", self.ids[r])));
            }
            w.iter_mut().for_each(|p| p.1 /= total);
        }
        Ok(out)
    }
}

/// Raster values as cell densities; nodata counts as zero population.
pub fn density_weights(raster: &AsciiGrid) -> Vec<f64> {
    (0..raster.geometry.n_cells()).map(|c| raster.get(c).unwrap_or(0.0)).collect()
}

/// Posterior summaries of a region's U5MR in one year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: String,
    pub year: i32,
    pub median: f64,
    pub mean: f64,
    pub q025: f64,
    pub q05: f64,
    pub q95: f64,
    pub q975: f64,
}

/// Region-level U5MR samples for one year.
#[derive(Debug, Clone, PartialEq)]
pub struct CountySeries {
    pub year: i32,
    pub ids: Vec<String>,
    /// `[region][sample]`
    pub samples: Vec<Vec<f64>>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

impl CountySeries {
    pub fn region(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|r| r == id).map(|i| self.samples[i].as_slice())
    }

    pub fn summaries(&self) -> Vec<RegionSummary> {
        self.ids
            .iter()
            .zip(&self.samples)
            .map(|(id, s)| {
                let mut v = s.clone();
                v.sort_by(f64::total_cmp);
                RegionSummary {
                    region: id.clone(),
                    year: self.year,
                    median: quantile_sorted(&v, 0.5),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    q025: quantile_sorted(&v, 0.025),
                    q05: quantile_sorted(&v, 0.05),
                    q95: quantile_sorted(&v, 0.95),
                    q975: quantile_sorted(&v, 0.975),
                }
            })
            .collect()
    }
}

/// Density-weighted mean of each sample over each region's cells; cells
/// without population get zero weight.
pub fn aggregate_region(samples: &SurfaceSamples, density: &[f64], regions: &RegionSet) -> Result<CountySeries> {
    if samples.n_cells != regions.cell_region.len() {
        return Err(Error::Aggregate(format!(
            "surface has {} cells but the regions cover {}",
            samples.n_cells,
            regions.cell_region.len()
        )));
    }
    let weights = regions.weights(density)?;
    let out: Vec<Result<Vec<f64>>> = weights
        .par_iter()
        .enumerate()
        .map(|(r, w)| {
            (0..samples.n_samples)
                .map(|s| {
                    let row = samples.sample(s);
                    let v: f64 = w.iter().map(|&(c, wc)| wc * row[c]).sum();
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::Aggregate(format!(
                            "region {} has non-finite values in populated cells",
                            regions.ids[r]
                        )))
                    }
                })
                .collect()
        })
        .collect();
    Ok(CountySeries {
        year: samples.year,
        ids: regions.ids.clone(),
        samples: out.into_iter().collect::<Result<_>>()?,
    })
}

/// Writes `region,year,median,q025,q975` rows.
pub fn write_region_csv(path: &Path, series: &[CountySeries]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        region: &'a str,
        year: i32,
        median: f64,
        q025: f64,
        q975: f64,
    }
    let sums: Vec<RegionSummary> = series.iter().flat_map(|s| s.summaries()).collect();
    write_csv(
        path,
        sums.iter().map(|s| Row {
            region: &s.region,
            year: s.year,
            median: s.median,
            q025: s.q025,
            q975: s.q975,
        }),
    )
}

/// Percentage drop between two years and the probability of reaching a
/// target drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSummary {
    pub region: String,
    pub median_drop: f64,
    pub q025: f64,
    pub q975: f64,
    /// Posterior probability that the drop is at least the target, with
    /// drops within 1e-9 percentage points of the target counted as reaching
    /// it.
    pub prob_target: f64,
}

pub const MDG_TARGET_DROP: f64 = 67.0;

/// Drops from `start` to `end` per region, sample by sample.
pub fn mdg_drop(start: &CountySeries, end: &CountySeries, target: f64) -> Result<Vec<DropSummary>> {
    if start.ids != end.ids {
        return Err(Error::Aggregate("the two years cover different regions".into()));
    }
    start
        .ids
        .iter()
        .zip(start.samples.iter().zip(&end.samples))
        .map(|(id, (a, b))| {
            if a.len() != b.len() {
                return Err(Error::Aggregate(format!(
                    "region {id}: {} samples in {} but {} in {}",
                    a.len(),
                    start.year,
                    b.len(),
                    end.year
                )));
            }
            if a.iter().any(|&v| v == 0.0) {
                return Err(Error::Aggregate(format!("region {id}: zero U5MR in {} sample", start.year)));
            }
            let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| 100.0 * (x - y) / x).collect();
            let hit = d.iter().filter(|&&v| v >= target - 1e-9).count();
            d.sort_by(f64::total_cmp);
            Ok(DropSummary {
                region: id.clone(),
                median_drop: quantile_sorted(&d, 0.5),
                q025: quantile_sorted(&d, 0.025),
                q975: quantile_sorted(&d, 0.975),
                prob_target: hit as f64 / d.len() as f64,
            })
        })
        .collect()
}

/// Spread of the posterior-median pixel values of a positive surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRatio {
    pub q95: f64,
    pub q05: f64,
    pub ratio: f64,
}

/// 95% and 5% points over cells of the per-cell posterior medians, and
/// their ratio. Cells where `include` is false or whose median is not
/// finite are skipped.
pub fn pixel_ratio_summary(surface: &SurfaceSamples, include: Option<&[bool]>) -> Result<PixelRatio> {
    let mut med: Vec<f64> = surface
        .cell_medians()
        .into_iter()
        .enumerate()
        .filter(|(c, v)| v.is_finite() && include.is_none_or(|m| m[*c]))
        .map(|(_, v)| v)
        .collect();
    if med.is_empty() {
        return Err(Error::Aggregate("no cells to summarize".into()));
    }
    med.sort_by(f64::total_cmp);
    let q95 = quantile_sorted(&med, 0.95);
    let q05 = quantile_sorted(&med, 0.05);
    Ok(PixelRatio { q95, q05, ratio: q95 / q05 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn surface(values: Vec<f64>, n_cells: usize) -> SurfaceSamples {
        SurfaceSamples {
            year: 2000,
            n_samples: values.len() / n_cells,
            n_cells,
            values,
        }
    }

    fn grid(ncols: usize, nrows: usize) -> GridGeometry {
        GridGeometry {
            ncols,
            nrows,
            xll: 0.0,
            yll: 0.0,
            cellsize: 1.0,
        }
    }

    #[test]
    fn two_cell_weighted_mean() {
        let r = RegionSet::from_assignment(vec!["a".into()], vec![Some(0), Some(0)]).unwrap();
        let s = aggregate_region(&surface(vec![0.1, 0.2], 2), &[3.0, 1.0], &r).unwrap();
        assert!((s.samples[0][0] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn constant_surface_and_zero_density() {
        let r = RegionSet::from_assignment(vec!["a".into(), "b".into()], vec![Some(0), Some(1), Some(1), None]).unwrap();
        let s = aggregate_region(&surface(vec![0.07; 8], 4), &[1.0, 2.0, 5.0, 0.0], &r).unwrap();
        assert!(s.samples.iter().flatten().all(|v| (v - 0.07).abs() < 1e-15));
        assert!(aggregate_region(&surface(vec![0.07; 4], 4), &[0.0, 2.0, 5.0, 1.0], &r).is_err());
    }

    #[test]
    fn polygon_assignment_with_holes() {
        let g = grid(4, 4);
        let outer = vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0], [0.0, 0.0]];
        let hole = vec![[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0], [1.0, 1.0]];
        let ring = Polygon { rings: vec![outer, hole.clone()] };
        let core = Polygon { rings: vec![hole] };
        let r = RegionSet::from_polygons(&g, &[("ring".into(), vec![ring]), ("core".into(), vec![core])]).unwrap();
        assert_eq!(r.cell_region.iter().filter(|c| **c == Some(1)).count(), 4);
        assert_eq!(r.cell_region.iter().filter(|c| **c == Some(0)).count(), 12);
    }

    #[test]
    fn geojson_round_trip() {
        let g = grid(3, 2);
        let r = RegionSet::from_assignment(
            vec!["7".into(), "x".into()],
            vec![Some(0), Some(0), Some(1), Some(1), None, Some(1)],
        )
        .unwrap();
        let back = RegionSet::from_geojson(&r.to_geojson(&g), &g).unwrap();
        assert_eq!(back, r);
        let numeric = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"id":3},
            "geometry":{"type":"Polygon","coordinates":[[[0,0],[3,0],[3,2],[0,2],[0,0]]]}}]}"#;
        assert_eq!(RegionSet::from_geojson(numeric, &g).unwrap().ids, vec!["3"]);
        let tiny = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"id":"t"},
            "geometry":{"type":"Polygon","coordinates":[[[0.1,0.1],[0.2,0.1],[0.2,0.2],[0.1,0.1]]]}}]}"#;
        assert!(RegionSet::from_geojson(tiny, &g).is_err());
    }

    #[test]
    fn national_equals_weighted_regional_mean() {
        let cells = 6;
        let r = RegionSet::from_assignment(
            vec!["a".into(), "b".into()],
            vec![Some(0), Some(1), Some(0), Some(1), Some(1), Some(0)],
        )
        .unwrap();
        let d = [1.0, 2.0, 0.5, 4.0, 1.5, 3.0];
        let s = surface(vec![0.1, 0.2, 0.15, 0.05, 0.3, 0.12, 0.2, 0.1, 0.1, 0.1, 0.4, 0.01], cells);
        let by_region = aggregate_region(&s, &d, &r).unwrap();
        let national = aggregate_region(&s, &d, &r.national("all")).unwrap();
        let da: f64 = [0, 2, 5].iter().map(|&c| d[c]).sum();
        let db: f64 = [1, 3, 4].iter().map(|&c| d[c]).sum();
        for k in 0..2 {
            let combo = (da * by_region.samples[0][k] + db * by_region.samples[1][k]) / (da + db);
            assert!((combo - national.samples[0][k]).abs() < 1e-15);
        }
    }

    #[test]
    fn halving_gives_fifty_percent_drop() {
        let ids = vec!["a".to_string()];
        let a = CountySeries { year: 1990, ids: ids.clone(), samples: vec![vec![0.2, 0.1, 0.3]] };
        let b = CountySeries { year: 2015, ids: ids.clone(), samples: vec![vec![0.1, 0.05, 0.15]] };
        let d = mdg_drop(&a, &b, MDG_TARGET_DROP).unwrap();
        assert!((d[0].median_drop - 50.0).abs() < 1e-12);
        assert_eq!(d[0].prob_target, 0.0);
        let c = CountySeries { year: 2015, ids: ids.clone(), samples: vec![vec![0.2 * 0.33, 0.1 * 0.33, 0.3 * 0.33]] };
        assert_eq!(mdg_drop(&a, &c, MDG_TARGET_DROP).unwrap()[0].prob_target, 1.0);
        let z = CountySeries { year: 1990, ids, samples: vec![vec![0.0, 0.1, 0.3]] };
        assert!(mdg_drop(&z, &b, MDG_TARGET_DROP).is_err());
    }

    #[test]
    fn constant_field_ratio_is_one() {
        let r = pixel_ratio_summary(&surface(vec![1.3; 40], 10), None).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lognormal_pixel_ratio() {
        let sigma: f64 = 0.4;
        let n = 40_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let nd = Normal::new(0.0, sigma).unwrap();
        let values: Vec<f64> = (0..n).map(|_| f64::exp(nd.sample(&mut rng))).collect();
        let r = pixel_ratio_summary(&surface(values, n), None).unwrap();
        let expect = (2.0 * 1.644_853_626_951_472_2 * sigma).exp();
        // quantile standard error on the log scale ~ sqrt(p(1-p)/n)/phi(z) * sigma
        let se = (0.05f64 * 0.95 / n as f64).sqrt() / 0.103_135_6 * sigma * 2.0_f64.sqrt();
        assert!((r.ratio.ln() - expect.ln()).abs() < 4.0 * se, "{} vs {expect}", r.ratio);
    }

    proptest! {
        #[test]
        fn aggregation_is_convex_and_scale_free(
            vals in proptest::collection::vec(0.0f64..1.0, 8),
            dens in proptest::collection::vec(0.01f64..5.0, 8),
            c in 0.01f64..100.0,
        ) {
            let r = RegionSet::from_assignment(vec!["a".into(), "b".into()],
                vec![Some(0), Some(0), Some(0), Some(1), Some(1), Some(1), Some(1), Some(0)]).unwrap();
            let s = surface(vals.clone(), 8);
            let a = aggregate_region(&s, &dens, &r).unwrap();
            let scaled: Vec<f64> = dens.iter().map(|d| d * c).collect();
            let b = aggregate_region(&s, &scaled, &r).unwrap();
            for k in 0..2 {
                let members: Vec<f64> = (0..8).filter(|&i| r.cell_region[i] == Some(k)).map(|i| vals[i]).collect();
                let lo = members.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = members.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a.samples[k][0] >= lo - 1e-12 && a.samples[k][0] <= hi + 1e-12);
                prop_assert!((a.samples[k][0] - b.samples[k][0]).abs() < 1e-12);
            }
        }

        #[test]
        fn splitting_and_recombining_a_region(
            vals in proptest::collection::vec(0.0f64..1.0, 6),
            dens in proptest::collection::vec(0.01f64..5.0, 6),
        ) {
            let whole = RegionSet::from_assignment(vec!["w".into()], vec![Some(0); 6]).unwrap();
            let split = RegionSet::from_assignment(vec!["p".into(), "q".into()],
                vec![Some(0), Some(1), Some(0), Some(1), Some(1), Some(0)]).unwrap();
            let s = surface(vals, 6);
            let w = aggregate_region(&s, &dens, &whole).unwrap().samples[0][0];
            let parts = aggregate_region(&s, &dens, &split).unwrap();
            let dp: f64 = [0, 2, 5].iter().map(|&i| dens[i]).sum();
            let dq: f64 = [1, 3, 4].iter().map(|&i| dens[i]).sum();
            let combo = (dp * parts.samples[0][0] + dq * parts.samples[1][0]) / (dp + dq);
            prop_assert!((combo - w).abs() < 1e-12);
        }
    }
}
