//! Synthetic truth surfaces, two-stage cluster surveys drawn from them, and a
//! reduced-form HIV selection mechanism with its exact bias ratios.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregate::RegionSet;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gmrf::{
    ar1_precision, population_constraints, sample_constrained, separable_st_precision, spde_matern_precision,
    AsciiGrid, GridGeometry, KnotSchedule, StudyDomain,
};
use crate::hazard::{
    age_band_of_month, expit, BirthRecord, ChildId, ClusterId, SurveyId, YearMonth, BAND_SPANS, MONTHS_UNDER_FIVE,
    N_BANDS,
};
use crate::model::{BiasOffsetTable, SurfaceSamples};
use crate::model::spec::{BAND_TREND, N_TRENDS};
use crate::survey::{AreaId, Cluster, ProvinceId, SurveyDataset};

/// Cap on monthly hazards after applying an excess-mortality multiplier.
const MAX_HAZARD: f64 = 0.999;

/// Settings for generating a [`TruthSurface`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    pub ncols: usize,
    pub nrows: usize,
    pub cellsize: f64,
    /// Counties are square blocks of this many cells per side.
    pub county_block: usize,
    /// Provinces are square blocks of this many counties per side.
    pub province_block: usize,
    pub year_first: i32,
    pub year_last: i32,
    pub knot_step: i32,
    /// Mesh padding in cells around the study grid.
    pub pad: usize,
    pub density_log_mean: f64,
    pub density_sigma: f64,
    pub density_range: f64,
    /// Cells at or above this density quantile are urban; 1 or more gives
    /// an all-rural country.
    pub urban_quantile: f64,
    /// Logit monthly hazard of each band at the reference level.
    pub beta: [f64; N_BANDS],
    pub rural_effect: f64,
    /// Yearly drift of each trend block.
    pub trend_slope: [f64; N_TRENDS],
    /// Conditional standard deviation of the RW2 trend increments.
    pub trend_sd: f64,
    /// Standard deviation of the yearly noise shared by all surveys.
    pub year_sd: f64,
    pub st_range: f64,
    pub st_sigma: f64,
    pub st_rho: f64,
    /// Logit effect per standard deviation of each simulated covariate;
    /// zero entries give decoys.
    pub covariate_effects: Vec<f64>,
    pub covariate_range: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            ncols: 20,
            nrows: 20,
            cellsize: 0.1,
            county_block: 5,
            province_block: 2,
            year_first: 1980,
            year_last: 2014,
            knot_step: 5,
            pad: 5,
            density_log_mean: 4.0,
            density_sigma: 1.0,
            density_range: 0.6,
            urban_quantile: 0.8,
            beta: [-3.5, -5.5, -6.5, -7.1, -7.4, -7.8],
            rural_effect: 0.2,
            trend_slope: [-0.015, -0.025, -0.03],
            trend_sd: 0.003,
            year_sd: 0.05,
            st_range: 0.8,
            st_sigma: 0.4,
            st_rho: 0.85,
            covariate_effects: vec![],
            covariate_range: 0.6,
        }
    }
}

/// Known logit hazards on a grid, with the population frame they live on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSurface {
    pub domain: StudyDomain,
    pub years: Vec<i32>,
    pub beta: [f64; N_BANDS],
    pub rural_effect: f64,
    /// `[trend][year]`, each centered.
    pub trends: Vec<Vec<f64>>,
    /// Space-time field on raster cells, `[year][cell]`.
    pub field: Vec<Vec<f64>>,
    /// Data-level yearly noise. Not part of the target surface.
    pub year_noise: Vec<f64>,
    pub density: AsciiGrid,
    pub urban: Vec<bool>,
    pub province: Vec<ProvinceId>,
    pub county: Vec<AreaId>,
    /// Standardized covariate rasters.
    pub covariates: Vec<AsciiGrid>,
    pub covariate_effects: Vec<f64>,
}

impl TruthSurface {
    pub fn generate(cfg: &TruthConfig, seed: u64) -> Result<Self> {
        if cfg.year_last < cfg.year_first {
            return Err(Error::Simulation(format!(
                "empty truth period {}-{}",
                cfg.year_first, cfg.year_last
            )));
        }
        if cfg.county_block == 0 || cfg.province_block == 0 {
            return Err(Error::Simulation("county and province blocks must be positive".into()));
        }
        let grid = GridGeometry {
            ncols: cfg.ncols,
            nrows: cfg.nrows,
            xll: 0.0,
            yll: 0.0,
            cellsize: cfg.cellsize,
        };
        let domain = StudyDomain::new(grid.clone(), cfg.pad)?;
        let n_cells = grid.n_cells();

        let mut density = vec![cfg.density_log_mean.exp(); n_cells];
        if cfg.density_sigma > 0.0 {
            let q = spde_matern_precision(&domain.mesh, cfg.density_range, cfg.density_sigma)?;
            let x = sample_constrained(&q.matrix, None, 1, stream_seed(seed, 1))?.remove(0);
            for (c, d) in density.iter_mut().enumerate() {
                *d = (cfg.density_log_mean + x[domain.cell_node(c)]).exp();
            }
        }
        let urban = if cfg.urban_quantile >= 1.0 {
            vec![false; n_cells]
        } else {
            let mut sorted = density.clone();
            sorted.sort_by(f64::total_cmp);
            let cut = crate::aggregate::quantile_sorted(&sorted, cfg.urban_quantile.max(0.0));
            density.iter().map(|&d| d >= cut).collect()
        };
        let density = AsciiGrid::new(grid.clone(), density)?;

        let (province, county) = block_partition(&grid, cfg.county_block, cfg.province_block);

        let years: Vec<i32> = (cfg.year_first..=cfg.year_last).collect();
        let mut knots = KnotSchedule::regular(cfg.year_first, cfg.year_last, cfg.knot_step)?;
        if knots.last() < cfg.year_last {
            knots = knots.extended(knots.last() + cfg.knot_step)?;
        }
        let q_t = ar1_precision(knots.len(), cfg.st_rho)?;
        let q_s = spde_matern_precision(&domain.mesh, cfg.st_range, cfg.st_sigma)?;
        let q = separable_st_precision(&q_t, &q_s)?;
        let node_density = domain.mesh_values(&density)?;
        let constraints = population_constraints(&domain.mesh, &node_density, &knots)?;
        let u = sample_constrained(&q.matrix, Some(&constraints), 1, stream_seed(seed, 2))?.remove(0);
        let n_s = domain.mesh.n_nodes();
        let field = years
            .iter()
            .map(|&y| {
                let w = knots.weights(y)?;
                Ok((0..n_cells)
                    .map(|c| {
                        let node = domain.cell_node(c);
                        w.iter().map(|&(k, a)| a * u[k * n_s + node]).sum()
                    })
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;

        let mut rng = stream_rng(seed, 3);
        let trends = cfg
            .trend_slope
            .iter()
            .map(|&slope| rw2_path(years.len(), slope, cfg.trend_sd, &mut rng))
            .collect();
        let year_noise = years
            .iter()
            .map(|_| cfg.year_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let mut covariates = Vec::with_capacity(cfg.covariate_effects.len());
        if !cfg.covariate_effects.is_empty() {
            let q = spde_matern_precision(&domain.mesh, cfg.covariate_range, 1.0)?;
            let draws = sample_constrained(&q.matrix, None, cfg.covariate_effects.len(), stream_seed(seed, 4))?;
            for x in draws {
                let mut z: Vec<f64> = (0..n_cells).map(|c| x[domain.cell_node(c)]).collect();
                let mean = z.iter().sum::<f64>() / n_cells as f64;
                let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_cells as f64).sqrt();
                z.iter_mut().for_each(|v| *v = (*v - mean) / sd.max(1e-12));
                covariates.push(AsciiGrid::new(grid.clone(), z)?);
            }
        }

        Ok(Self {
            domain,
            years,
            beta: cfg.beta,
            rural_effect: cfg.rural_effect,
            trends,
            field,
            year_noise,
            density,
            urban,
            province,
            county,
            covariates,
            covariate_effects: cfg.covariate_effects.clone(),
        })
    }

    pub fn grid(&self) -> &GridGeometry {
        &self.domain.grid
    }

    pub fn n_cells(&self) -> usize {
        self.domain.grid.n_cells()
    }

    pub fn year_index(&self, year: i32) -> Result<usize> {
        self.years
            .binary_search(&year)
            .map_err(|_| Error::Simulation(format!("year {year} outside the truth period")))
    }

    /// Target logit hazards of `cell` in year index `t`, without data noise.
    pub fn logits(&self, cell: usize, t: usize) -> [f64; N_BANDS] {
        let mut shift = self.field[t][cell] + if self.urban[cell] { 0.0 } else { self.rural_effect };
        for (z, b) in self.covariates.iter().zip(&self.covariate_effects) {
            shift += b * z.get(cell).unwrap_or(0.0);
        }
        std::array::from_fn(|a| self.beta[a] + shift + self.trends[BAND_TREND[a]][t])
    }

    pub fn provinces(&self) -> BTreeSet<ProvinceId> {
        self.province.iter().copied().collect()
    }

    /// Population-weighted U5MR of every cell in `year`, mixing affected
    /// and unaffected births as the epidemic dictates.
    pub fn u5mr_surface(&self, year: i32, epidemic: &HivEpidemicSpec) -> Result<SurfaceSamples> {
        let t = self.year_index(year)?;
        let values = (0..self.n_cells())
            .map(|c| {
                let h = epidemic.get(self.province[c], year)?;
                let prevalence = epidemic.cohort_prevalence(self.province[c], year)?;
                Ok(u5mr_period_mixture(&self.logits(c, t), h.multiplier, &prevalence))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(SurfaceSamples {
            year,
            n_samples: 1,
            n_cells: self.n_cells(),
            values,
        })
    }

    /// Counties as a region set, ids as decimal strings.
    pub fn county_regions(&self) -> Result<RegionSet> {
        let ids: BTreeSet<AreaId> = self.county.iter().copied().collect();
        let ids: Vec<AreaId> = ids.into_iter().collect();
        let cell_region = self.county.iter().map(|c| ids.binary_search(c).ok()).collect();
        RegionSet::from_assignment(ids.iter().map(|c| c.to_string()).collect(), cell_region)
    }

    /// Density-weighted truth U5MR of each county in `year`, in
    /// [`TruthSurface::county_regions`] order.
    pub fn county_u5mr(&self, year: i32, epidemic: &HivEpidemicSpec) -> Result<Vec<(String, f64)>> {
        let regions = self.county_regions()?;
        let surface = self.u5mr_surface(year, epidemic)?;
        let series = crate::aggregate::aggregate_region(
            &surface,
            &crate::aggregate::density_weights(&self.density),
            &regions,
        )?;
        Ok(series.ids.into_iter().zip(series.samples.into_iter().map(|s| s[0])).collect())
    }
}

/// `1 - prod_a (1 - min(m q_a, cap))^{z[a]}` for logit hazards `l`.
pub fn u5mr_scaled(l: &[f64; N_BANDS], multiplier: f64) -> f64 {
    let log_survival: f64 = l
        .iter()
        .zip(BAND_SPANS)
        .map(|(&b, z)| z as f64 * (-(multiplier * expit(b)).min(MAX_HAZARD)).ln_1p())
        .sum();
    -log_survival.exp_m1()
}

/// Period U5MR when a share `prevalence[k]` of the children aged `12k` to
/// `12k + 11` months were born affected and carry the hazard `multiplier`.
/// Each month mixes the two hazards by the survivors of its cohort, which is
/// what yearly person-month data measure while prevalence changes.
pub fn u5mr_period_mixture(l: &[f64; N_BANDS], multiplier: f64, prevalence: &[f64; 5]) -> f64 {
    let (mut s0, mut s1, mut log_survival) = (1.0, 1.0, 0.0);
    for m in 0..MONTHS_UNDER_FIVE {
        let band = age_band_of_month(m).map_or(N_BANDS - 1, |b| b.position());
        let q0 = expit(l[band]).min(MAX_HAZARD);
        let q1 = (multiplier * q0).min(MAX_HAZARD);
        let p = prevalence[(m / 12) as usize];
        let at_risk = p * s1 + (1.0 - p) * s0;
        let w = if at_risk > 0.0 { p * s1 / at_risk } else { 0.0 };
        log_survival += (-(w * q1 + (1.0 - w) * q0)).ln_1p();
        s0 *= 1.0 - q0;
        s1 *= 1.0 - q1;
    }
    -log_survival.exp_m1()
}

/// County and province ids of every cell; ids count from 1 row-major from
/// the top-left block.
fn block_partition(grid: &GridGeometry, county_block: usize, province_block: usize) -> (Vec<ProvinceId>, Vec<AreaId>) {
    let n_cx = grid.ncols.div_ceil(county_block);
    let n_px = n_cx.div_ceil(province_block);
    let mut province = Vec::with_capacity(grid.n_cells());
    let mut county = Vec::with_capacity(grid.n_cells());
    for cell in 0..grid.n_cells() {
        let (col, row) = (cell % grid.ncols, cell / grid.ncols);
        let (cx, cy) = (col / county_block, row / county_block);
        county.push((cy * n_cx + cx + 1) as AreaId);
        let (px, py) = (cx / province_block, cy / province_block);
        province.push((py * n_px + px + 1) as ProvinceId);
    }
    (province, county)
}

/// Centered second-order random walk with initial drift `slope`.
fn rw2_path(n: usize, slope: f64, sd: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = Vec::with_capacity(n);
    for t in 0..n {
        let v = match t {
            0 => 0.0,
            1 => slope,
            _ => 2.0 * x[t - 1] - x[t - 2] + sd * rng.sample::<f64, _>(StandardNormal),
        };
        x.push(v);
    }
    let mean = x.iter().sum::<f64>() / n.max(1) as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    x
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).random()
}

/// Epidemic state of one province in one year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HivCell {
    /// Share of births to affected mothers.
    pub prevalence: f64,
    /// Probability an affected mother is missing from the survey frame.
    pub selection: f64,
    /// Excess child hazard multiplier for affected births.
    pub multiplier: f64,
}

impl HivCell {
    pub const NONE: Self = Self {
        prevalence: 0.0,
        selection: 0.0,
        multiplier: 1.0,
    };

    fn validate(&self, province: ProvinceId, year: i32) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !p(self.prevalence) || !p(self.selection) || !(self.multiplier >= 1.0) || !self.multiplier.is_finite() {
            return Err(Error::Simulation(format!(
                "epidemic cell ({province}, {year}) needs probabilities in [0,1] and multiplier >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HivEpidemicSpec {
    cells: BTreeMap<(ProvinceId, i32), HivCell>,
}

impl HivEpidemicSpec {
    pub fn new(cells: BTreeMap<(ProvinceId, i32), HivCell>) -> Result<Self> {
        for (&(p, y), c) in &cells {
            c.validate(p, y)?;
        }
        Ok(Self { cells })
    }

    pub fn none(provinces: &BTreeSet<ProvinceId>, years: &[i32]) -> Self {
        let cells = provinces
            .iter()
            .flat_map(|&p| years.iter().map(move |&y| ((p, y), HivCell::NONE)))
            .collect();
        Self { cells }
    }

    /// Prevalence rising linearly from `onset` to `peak[p]` at `peak_year`
    /// and declining afterwards at half that rate, with constant selection
    /// and multiplier. `peak` is recycled over provinces in id order.
    pub fn profile(
        provinces: &BTreeSet<ProvinceId>,
        years: &[i32],
        peak: &[f64],
        onset: i32,
        peak_year: i32,
        selection: f64,
        multiplier: f64,
    ) -> Result<Self> {
        if peak.is_empty() || peak_year <= onset {
            return Err(Error::Simulation(
                "epidemic profile needs peak prevalences and onset < peak year".into(),
            ));
        }
        let mut cells = BTreeMap::new();
        for (i, &p) in provinces.iter().enumerate() {
            let top = peak[i % peak.len()];
            for &y in years {
                let rise = (peak_year - onset) as f64;
                let shape = if y <= onset {
                    0.0
                } else if y <= peak_year {
                    (y - onset) as f64 / rise
                } else {
                    (1.0 - 0.5 * (y - peak_year) as f64 / rise).max(0.0)
                };
                cells.insert(
                    (p, y),
                    HivCell {
                        prevalence: top * shape,
                        selection,
                        multiplier,
                    },
                );
            }
        }
        Self::new(cells)
    }

    pub fn get(&self, province: ProvinceId, year: i32) -> Result<HivCell> {
        self.cells
            .get(&(province, year))
            .copied()
            .ok_or_else(|| Error::Simulation(format!("epidemic does not cover province {province}, year {year}")))
    }

    /// Birth-year prevalence of the children aged 0 to 4 full years in
    /// `year`. Birth years before the epidemic's coverage take the earliest
    /// covered year.
    pub fn cohort_prevalence(&self, province: ProvinceId, year: i32) -> Result<[f64; 5]> {
        let mut out = [0.0; 5];
        for (k, p) in out.iter_mut().enumerate() {
            let born = year - k as i32;
            *p = match self.cells.get(&(province, born)) {
                Some(c) => c.prevalence,
                None => self
                    .cells
                    .range((province, i32::MIN)..=(province, year))
                    .next()
                    .map(|(_, c)| c.prevalence)
                    .ok_or_else(|| Error::Simulation(format!("epidemic does not cover province {province}, year {year}")))?,
            };
        }
        Ok(out)
    }

    pub fn is_null(&self) -> bool {
        self.cells.values().all(|c| c.prevalence == 0.0 || (c.selection == 0.0 && c.multiplier == 1.0))
    }
}

/// How clusters are spread over strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// The same number of clusters in every stratum.
    Equal,
    /// `clusters_per_stratum * n_strata` clusters in proportion to stratum
    /// population (largest remainder).
    Proportional,
}

impl std::str::FromStr for Allocation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "equal" => Ok(Allocation::Equal),
            "proportional" => Ok(Allocation::Proportional),
            other => Err(format!("unknown allocation `{other}` (equal | proportional)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyDesign {
    pub survey_id: SurveyId,
    pub interview: YearMonth,
    pub allocation: Allocation,
    pub clusters_per_stratum: usize,
    pub households_per_cluster: usize,
    /// Mean number of births per household within the history window.
    pub births_per_household: f64,
    pub history_years: u32,
    /// Frame households per unit density in a cell.
    pub households_per_density: f64,
    pub cluster_sd: f64,
    pub survey_sd: f64,
    pub first_cluster_id: ClusterId,
    pub first_child_id: ChildId,
}

/// A survey with the latent HIV status of every birth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSurvey {
    pub dataset: SurveyDataset,
    /// Births whose mother is affected.
    pub affected: BTreeSet<ChildId>,
}

/// Per-stratum sampling frame: cells with positive density.
struct Frame {
    stratum_id: u32,
    province: ProvinceId,
    urban: bool,
    cells: Vec<usize>,
    total: f64,
}

fn frames(truth: &TruthSurface) -> Result<Vec<Frame>> {
    let mut by: BTreeMap<(ProvinceId, bool), Vec<usize>> = BTreeMap::new();
    for c in 0..truth.n_cells() {
        by.entry((truth.province[c], truth.urban[c])).or_default().push(c);
    }
    by.into_iter()
        .map(|((province, urban), cells)| {
            let total: f64 = cells.iter().map(|&c| truth.density.get(c).unwrap_or(0.0)).sum();
            if !(total > 0.0) {
                return Err(Error::Simulation(format!(
                    "stratum (province {province}, {}) has zero population density",
                    if urban { "urban" } else { "rural" }
                )));
            }
            Ok(Frame {
                stratum_id: 2 * (province - 1) + if urban { 1 } else { 2 },
                province,
                urban,
                cells,
                total,
            })
        })
        .collect()
}

fn allocate(frames: &[Frame], design: &SurveyDesign) -> Vec<usize> {
    match design.allocation {
        Allocation::Equal => vec![design.clusters_per_stratum; frames.len()],
        Allocation::Proportional => {
            let n = design.clusters_per_stratum * frames.len();
            let total: f64 = frames.iter().map(|f| f.total).sum();
            let quota: Vec<f64> = frames.iter().map(|f| n as f64 * f.total / total).collect();
            let mut out: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
            let mut order: Vec<usize> = (0..frames.len()).collect();
            order.sort_by(|&a, &b| (quota[b] - quota[b].floor()).total_cmp(&(quota[a] - quota[a].floor())));
            let short = n - out.iter().sum::<usize>();
            for &i in order.iter().take(short) {
                out[i] += 1;
            }
            out
        }
    }
}

fn month_index(ym: YearMonth) -> i64 {
    ym.year as i64 * 12 + ym.month as i64 - 1
}

fn from_month_index(i: i64) -> YearMonth {
    YearMonth {
        year: i.div_euclid(12) as i32,
        month: (i.rem_euclid(12) + 1) as u8,
    }
}

/// Draws one survey: clusters by PPS with replacement within strata, a
/// fixed number of households per cluster, and month-by-month survival of
/// every birth from the truth hazards plus cluster, survey and year noise.
/// Births are flagged as HIV-affected with the epidemic's prevalence in
/// their birth year; affected births carry the excess hazard.
pub fn simulate_survey(
    truth: &TruthSurface,
    design: &SurveyDesign,
    epidemic: &HivEpidemicSpec,
    seed: u64,
) -> Result<SimulatedSurvey> {
    let interview = design.interview;
    if truth.year_index(interview.year).is_err() {
        return Err(Error::Simulation(format!(
            "interview year {} outside the truth period",
            interview.year
        )));
    }
    if !(design.births_per_household > 0.0) || design.households_per_cluster == 0 {
        return Err(Error::Simulation("design needs households and a positive birth rate".into()));
    }
    let frames = frames(truth)?;
    let counts = allocate(&frames, design);
    let mut rng = stream_rng(seed, 1000 + design.survey_id as u64);
    let births_dist = Poisson::new(design.births_per_household)
        .map_err(|e| Error::Simulation(format!("bad birth rate: {e}")))?;
    let cluster_noise = Normal::new(0.0, design.cluster_sd.max(0.0))
        .map_err(|e| Error::Simulation(format!("bad cluster sd: {e}")))?;
    let survey_effect = design.survey_sd.max(0.0) * rng.sample::<f64, _>(StandardNormal);

    let end = month_index(interview);
    let start = (end - 12 * design.history_years as i64).max(truth.years[0] as i64 * 12);
    if start >= end {
        return Err(Error::Simulation("birth history window is empty".into()));
    }

    let mut clusters = Vec::new();
    let mut births = Vec::new();
    let mut affected = BTreeSet::new();
    let mut next_cluster = design.first_cluster_id;
    let mut next_child = design.first_child_id;

    for (frame, &n_h) in frames.iter().zip(&counts) {
        if n_h == 0 {
            continue;
        }
        let weight = design.households_per_density * frame.total / (n_h * design.households_per_cluster) as f64;
        let dens: Vec<f64> = frame.cells.iter().map(|&c| truth.density.get(c).unwrap_or(0.0)).collect();
        for _ in 0..n_h {
            let mut pick = rng.random::<f64>() * frame.total;
            let mut k = 0;
            while k + 1 < dens.len() && pick >= dens[k] {
                pick -= dens[k];
                k += 1;
            }
            let cell = frame.cells[k];
            let (lon, lat) = truth.grid().cell_center(cell);
            let cluster_id = next_cluster;
            next_cluster += 1;
            clusters.push(Cluster {
                cluster_id,
                survey_id: design.survey_id,
                stratum_id: frame.stratum_id,
                lon,
                lat,
                weight,
                province: frame.province,
                area: truth.county[cell],
                urban: frame.urban,
            });
            let eta = cluster_noise.sample(&mut rng);
            for _ in 0..design.households_per_cluster {
                let n_births = births_dist.sample(&mut rng) as usize;
                for _ in 0..n_births {
                    let born = rng.random_range(start..end);
                    let birth = from_month_index(born);
                    let status = epidemic.get(frame.province, birth.year)?;
                    let is_affected = rng.random::<f64>() < status.prevalence;
                    let mult = if is_affected { status.multiplier } else { 1.0 };
                    let horizon = (end - born).min(MONTHS_UNDER_FIVE as i64) as u32;
                    let mut death = None;
                    for m in 0..horizon {
                        // Same year convention as the person-month expansion.
                        let year = birth.year + (m / 12) as i32;
                        let t = truth.year_index(year)?;
                        let band = age_band_of_month(m)?.position();
                        let l = truth.logits(cell, t)[band] + eta + survey_effect + truth.year_noise[t];
                        let q = (mult * expit(l)).min(MAX_HAZARD);
                        if rng.random::<f64>() < q {
                            death = Some(m);
                            break;
                        }
                    }
                    let child_id = next_child;
                    next_child += 1;
                    if is_affected {
                        affected.insert(child_id);
                    }
                    births.push(BirthRecord {
                        child_id,
                        cluster_id,
                        survey_id: design.survey_id,
                        birth,
                        died: death.is_some(),
                        death_month: death,
                        interview,
                    });
                }
            }
        }
    }
    Ok(SimulatedSurvey {
        dataset: SurveyDataset::new(design.survey_id, clusters, births)?,
        affected,
    })
}

/// Removes each affected birth with the selection probability of its
/// province in the interview year, and returns the ratio of true to
/// reported U5MR for every province and year in `years`.
///
/// In province `l`, year `t` and survey `k`, with prevalence `p`,
/// multiplier `m` and selection `s`, each cell's truth is
/// `p U(m q) + (1 - p) U(q)` and its reported value is
/// `[p (1 - s) U(m q) + (1 - p) U(q)] / [p (1 - s) + 1 - p]`; both are
/// averaged over the province with density weights.
pub fn apply_hiv_selection(
    survey: &SimulatedSurvey,
    truth: &TruthSurface,
    epidemic: &HivEpidemicSpec,
    years: &[i32],
    seed: u64,
) -> Result<(SurveyDataset, BiasOffsetTable)> {
    let d = &survey.dataset;
    let interview_year = d
        .all_births()
        .map(|b| b.interview.year)
        .next()
        .unwrap_or(*truth.years.last().unwrap_or(&0));
    let mut rng = stream_rng(seed, 5000 + d.survey_id as u64);
    let mut kept = Vec::new();
    for b in d.all_births() {
        if survey.affected.contains(&b.child_id) {
            let province = d
                .cluster(b.cluster_id)
                .map(|c| c.province)
                .ok_or_else(|| Error::Simulation(format!("child {} has no cluster", b.child_id)))?;
            let s = epidemic.get(province, interview_year)?.selection;
            if rng.random::<f64>() < s {
                continue;
            }
        }
        kept.push(b.clone());
    }
    let biased = SurveyDataset::new(d.survey_id, d.clusters.clone(), kept)?;

    let mut table = BiasOffsetTable::new();
    for &province in &truth.provinces() {
        let s = epidemic.get(province, interview_year)?.selection;
        let cells: Vec<usize> = (0..truth.n_cells()).filter(|&c| truth.province[c] == province).collect();
        for &year in years {
            let t = truth.year_index(year)?;
            let h = epidemic.get(province, year)?;
            let prevalence = epidemic.cohort_prevalence(province, year)?;
            // Affected share among the births that survive selection.
            let reported = prevalence.map(|p| if p * s < 1.0 { p * (1.0 - s) / (1.0 - p * s) } else { 0.0 });
            let (mut num, mut den, mut w) = (0.0, 0.0, 0.0);
            for &c in &cells {
                let dc = truth.density.get(c).unwrap_or(0.0);
                let l = truth.logits(c, t);
                num += dc * u5mr_period_mixture(&l, h.multiplier, &prevalence);
                den += dc * u5mr_period_mixture(&l, h.multiplier, &reported);
                w += dc;
            }
            if !(w > 0.0) {
                continue;
            }
            // Reported mixes put less weight on the elevated component, so
            // the ratio is at least one up to round-off.
            table.insert(province, d.survey_id, year, (num / den).max(1.0))?;
        }
    }
    Ok((biased, table))
}

/// Everything one simulation run produces.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub truth: TruthSurface,
    pub epidemic: HivEpidemicSpec,
    pub surveys: Vec<SimulatedSurvey>,
    /// Surveys after HIV selection; identical to `surveys` without an
    /// epidemic.
    pub observed: Vec<SurveyDataset>,
    pub offsets: BiasOffsetTable,
}

/// Key-value settings of a full simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub truth: TruthConfig,
    pub survey_years: Vec<i32>,
    pub interview_month: u8,
    pub allocation: Allocation,
    pub clusters_per_stratum: usize,
    pub households_per_cluster: usize,
    pub births_per_household: f64,
    pub history_years: u32,
    pub households_per_density: f64,
    pub cluster_sd: f64,
    pub survey_sd: f64,
    /// Empty for no epidemic.
    pub hiv_peak: Vec<f64>,
    pub hiv_onset: i32,
    pub hiv_peak_year: i32,
    pub hiv_selection: f64,
    pub hiv_multiplier: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            truth: TruthConfig::default(),
            survey_years: vec![1998, 2003, 2014],
            interview_month: 6,
            allocation: Allocation::Proportional,
            clusters_per_stratum: 12,
            households_per_cluster: 25,
            births_per_household: 3.0,
            history_years: 25,
            households_per_density: 2.0,
            cluster_sd: 0.2,
            survey_sd: 0.05,
            hiv_peak: vec![],
            hiv_onset: 1985,
            hiv_peak_year: 1998,
            hiv_selection: 0.5,
            hiv_multiplier: 3.0,
        }
    }
}

impl SimConfig {
    pub const KEYS: &'static [&'static str] = &[
        "sim.ncols",
        "sim.nrows",
        "sim.cellsize",
        "sim.county_block",
        "sim.province_block",
        "sim.year_first",
        "sim.year_last",
        "sim.knot_step",
        "sim.pad",
        "density.log_mean",
        "density.sigma",
        "density.range",
        "density.urban_quantile",
        "truth.beta",
        "truth.rural_effect",
        "truth.trend_slope",
        "truth.trend_sd",
        "truth.year_sd",
        "truth.st_range",
        "truth.st_sigma",
        "truth.st_rho",
        "truth.covariate_effects",
        "truth.covariate_range",
        "survey.years",
        "survey.interview_month",
        "survey.allocation",
        "survey.clusters_per_stratum",
        "survey.households_per_cluster",
        "survey.births_per_household",
        "survey.history_years",
        "survey.households_per_density",
        "survey.cluster_sd",
        "survey.survey_sd",
        "hiv.peak_prevalence",
        "hiv.onset",
        "hiv.peak_year",
        "hiv.selection",
        "hiv.multiplier",
    ];

    /// Reads the `sim.`, `density.`, `truth.`, `survey.` and `hiv.` keys;
    /// other keys are ignored.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let t = &d.truth;
        let fixed = |key: &str, default: &[f64], n: usize| -> Result<Vec<f64>> {
            let v = cfg.get_list::<f64>(key)?.unwrap_or_else(|| default.to_vec());
            if v.len() != n {
                return Err(cfg.invalid(key, format!("expected {n} values, got {}", v.len())));
            }
            Ok(v)
        };
        let beta = fixed("truth.beta", &t.beta, N_BANDS)?;
        let slope = fixed("truth.trend_slope", &t.trend_slope, N_TRENDS)?;
        let truth = TruthConfig {
            ncols: cfg.get_or("sim.ncols", t.ncols)?,
            nrows: cfg.get_or("sim.nrows", t.nrows)?,
            cellsize: cfg.get_or("sim.cellsize", t.cellsize)?,
            county_block: cfg.get_or("sim.county_block", t.county_block)?,
            province_block: cfg.get_or("sim.province_block", t.province_block)?,
            year_first: cfg.get_or("sim.year_first", t.year_first)?,
            year_last: cfg.get_or("sim.year_last", t.year_last)?,
            knot_step: cfg.get_or("sim.knot_step", t.knot_step)?,
            pad: cfg.get_or("sim.pad", t.pad)?,
            density_log_mean: cfg.get_or("density.log_mean", t.density_log_mean)?,
            density_sigma: cfg.get_or("density.sigma", t.density_sigma)?,
            density_range: cfg.get_or("density.range", t.density_range)?,
            urban_quantile: cfg.get_or("density.urban_quantile", t.urban_quantile)?,
            beta: std::array::from_fn(|i| beta[i]),
            rural_effect: cfg.get_or("truth.rural_effect", t.rural_effect)?,
            trend_slope: std::array::from_fn(|i| slope[i]),
            trend_sd: cfg.get_or("truth.trend_sd", t.trend_sd)?,
            year_sd: cfg.get_or("truth.year_sd", t.year_sd)?,
            st_range: cfg.get_or("truth.st_range", t.st_range)?,
            st_sigma: cfg.get_or("truth.st_sigma", t.st_sigma)?,
            st_rho: cfg.get_or("truth.st_rho", t.st_rho)?,
            covariate_effects: cfg.get_list("truth.covariate_effects")?.unwrap_or_default(),
            covariate_range: cfg.get_or("truth.covariate_range", t.covariate_range)?,
        };
        let out = Self {
            truth,
            survey_years: cfg.get_list("survey.years")?.unwrap_or(d.survey_years),
            interview_month: cfg.get_or("survey.interview_month", d.interview_month)?,
            allocation: cfg.get_or("survey.allocation", d.allocation)?,
            clusters_per_stratum: cfg.get_or("survey.clusters_per_stratum", d.clusters_per_stratum)?,
            households_per_cluster: cfg.get_or("survey.households_per_cluster", d.households_per_cluster)?,
            births_per_household: cfg.get_or("survey.births_per_household", d.births_per_household)?,
            history_years: cfg.get_or("survey.history_years", d.history_years)?,
            households_per_density: cfg.get_or("survey.households_per_density", d.households_per_density)?,
            cluster_sd: cfg.get_or("survey.cluster_sd", d.cluster_sd)?,
            survey_sd: cfg.get_or("survey.survey_sd", d.survey_sd)?,
            hiv_peak: cfg.get_list("hiv.peak_prevalence")?.unwrap_or(d.hiv_peak),
            hiv_onset: cfg.get_or("hiv.onset", d.hiv_onset)?,
            hiv_peak_year: cfg.get_or("hiv.peak_year", d.hiv_peak_year)?,
            hiv_selection: cfg.get_or("hiv.selection", d.hiv_selection)?,
            hiv_multiplier: cfg.get_or("hiv.multiplier", d.hiv_multiplier)?,
        };
        let t = &out.truth;
        let checks: [(&str, bool, &str); 10] = [
            ("sim.ncols", t.ncols >= 1 && t.nrows >= 1, "grid must have at least one cell"),
            ("sim.cellsize", t.cellsize > 0.0, "must be positive"),
            ("sim.year_last", t.year_last >= t.year_first, "must not precede sim.year_first"),
            ("sim.knot_step", t.knot_step > 0, "must be positive"),
            ("truth.st_rho", t.st_rho.abs() < 1.0, "must lie in (-1, 1)"),
            ("truth.st_range", t.st_range > 0.0 && t.st_sigma > 0.0, "range and sigma must be positive"),
            ("survey.years", !out.survey_years.is_empty(), "needs at least one survey"),
            ("survey.interview_month", (1..=12).contains(&out.interview_month), "must be 1..=12"),
            (
                "survey.years",
                out.survey_years.iter().all(|y| (t.year_first..=t.year_last).contains(y)),
                "interview years must lie within the truth period",
            ),
            (
                "hiv.peak_prevalence",
                out.hiv_peak.iter().all(|p| (0.0..=1.0).contains(p)),
                "prevalences must lie in [0, 1]",
            ),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(cfg.invalid(key, msg));
            }
        }
        if !(0.0..=1.0).contains(&out.hiv_selection) {
            return Err(cfg.invalid("hiv.selection", "must lie in [0, 1]"));
        }
        if !(out.hiv_multiplier >= 1.0) {
            return Err(cfg.invalid("hiv.multiplier", "must be at least 1"));
        }
        Ok(out)
    }

    pub fn designs(&self) -> Vec<SurveyDesign> {
        self.survey_years
            .iter()
            .enumerate()
            .map(|(k, &year)| SurveyDesign {
                survey_id: k as SurveyId + 1,
                interview: YearMonth {
                    year,
                    month: self.interview_month,
                },
                allocation: self.allocation,
                clusters_per_stratum: self.clusters_per_stratum,
                households_per_cluster: self.households_per_cluster,
                births_per_household: self.births_per_household,
                history_years: self.history_years,
                households_per_density: self.households_per_density,
                cluster_sd: self.cluster_sd,
                survey_sd: self.survey_sd,
                first_cluster_id: (k as ClusterId + 1) * 100_000,
                first_child_id: (k as ChildId + 1) * 100_000_000,
            })
            .collect()
    }

    pub fn epidemic(&self, truth: &TruthSurface) -> Result<HivEpidemicSpec> {
        if self.hiv_peak.is_empty() {
            return Ok(HivEpidemicSpec::none(&truth.provinces(), &truth.years));
        }
        HivEpidemicSpec::profile(
            &truth.provinces(),
            &truth.years,
            &self.hiv_peak,
            self.hiv_onset,
            self.hiv_peak_year,
            self.hiv_selection,
            self.hiv_multiplier,
        )
    }

    /// Truth, surveys, selection and offsets, all determined by `seed`.
    pub fn run(&self, seed: u64) -> Result<Simulation> {
        let truth = TruthSurface::generate(&self.truth, seed)?;
        let epidemic = self.epidemic(&truth)?;
        let designs = self.designs();
        let surveys = designs
            .iter()
            .map(|d| simulate_survey(&truth, d, &epidemic, seed))
            .collect::<Result<Vec<_>>>()?;
        let mut observed = Vec::with_capacity(surveys.len());
        let mut offsets = BiasOffsetTable::new();
        for s in &surveys {
            let (d, table) = apply_hiv_selection(s, &truth, &epidemic, &truth.years, seed)?;
            for r in table.rows() {
                offsets.insert(r.province, r.survey_id, r.year, r.ratio)?;
            }
            observed.push(d);
        }
        Ok(Simulation {
            truth,
            epidemic,
            surveys,
            observed,
            offsets,
        })
    }
}
