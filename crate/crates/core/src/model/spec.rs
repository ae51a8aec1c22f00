//! Latent-field layout of the smoothing models, their precision structure,
//! constraints and hyperparameters, and the design linking person-month cells
//! to the latent field.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::covariates::{CovariateDesign, CovariateLayer};
use super::offset::BiasOffsetTable;
use crate::error::{Error, Result};
use crate::gmrf::{
    random_walk_structure, AsciiGrid, ConstraintSet, CscMatrix, Hyperparameters, KnotSchedule,
    MaternParams, PriorSettings, SpaceTimeParams, StudyDomain,
};
use crate::hazard::{ClusterId, PersonMonth, SurveyId, N_BANDS};
use crate::survey::{ExposureTable, ProvinceId, YearRange};

/// RW2 trend shared by each age band: `[0,1)`, `[1,12)` and `[12,60)`.
pub const BAND_TREND: [usize; N_BANDS] = [0, 1, 2, 2, 2, 2];
pub const N_TRENDS: usize = 3;

/// Which smoothing model to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Yearly model with RW2 trends, IID year effects and the separable
    /// AR(1) x Matern space-time field.
    SpaceTime,
    /// Period model with a time-invariant spatial field.
    M2,
    /// Period model with standardized covariates.
    M3,
    /// Period model with covariates and a spatial field.
    M4,
}

impl Variant {
    pub fn has_spatial(self) -> bool {
        matches!(self, Variant::M2 | Variant::M4)
    }

    pub fn has_covariates(self) -> bool {
        matches!(self, Variant::M3 | Variant::M4)
    }

    pub fn is_period_model(self) -> bool {
        self != Variant::SpaceTime
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "space_time" | "base" => Ok(Variant::SpaceTime),
            "m2" => Ok(Variant::M2),
            "m3" => Ok(Variant::M3),
            "m4" => Ok(Variant::M4),
            other => Err(format!("unknown model variant `{other}` (space_time | m2 | m3 | m4)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::SpaceTime => "space_time",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
            Variant::M4 => "m4",
        })
    }
}

/// The model's time index: calendar years or 5-year periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TimeAxis {
    Years { first: i32, last: i32 },
    Periods(Vec<YearRange>),
}

impl TimeAxis {
    pub fn len(&self) -> usize {
        match self {
            TimeAxis::Years { first, last } => (last - first + 1) as usize,
            TimeAxis::Periods(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Time index of a calendar year.
    pub fn index_of(&self, year: i32) -> Option<usize> {
        match self {
            TimeAxis::Years { first, last } => {
                (*first..=*last).contains(&year).then(|| (year - first) as usize)
            }
            TimeAxis::Periods(p) => p.iter().position(|r| r.contains(year)),
        }
    }
}

/// Hyperparameters on their internal (unconstrained) scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperKind {
    /// `log tau_eta`
    ClusterPrecision,
    /// `log tau_upsilon`
    SurveyPrecision,
    /// `log tau_epsilon`
    YearPrecision,
    /// `log tau_phi`
    TrendPrecision,
    /// `log r` of the space-time field
    StRange,
    /// `log sigma` of the space-time field
    StSigma,
    /// `rho = 2 expit(theta) - 1`
    StRho,
    /// `log tau_gamma` of the period RW1
    PeriodPrecision,
    /// `log r` of the spatial field
    SpatialRange,
    /// `log sigma` of the spatial field
    SpatialSigma,
}

impl HyperKind {
    pub fn name(self) -> &'static str {
        match self {
            HyperKind::ClusterPrecision => "log_prec_cluster",
            HyperKind::SurveyPrecision => "log_prec_survey",
            HyperKind::YearPrecision => "log_prec_year",
            HyperKind::TrendPrecision => "log_prec_rw2",
            HyperKind::StRange => "log_range_st",
            HyperKind::StSigma => "log_sigma_st",
            HyperKind::StRho => "rho_st_internal",
            HyperKind::PeriodPrecision => "log_prec_period",
            HyperKind::SpatialRange => "log_range_spatial",
            HyperKind::SpatialSigma => "log_sigma_spatial",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub const ALL: [HyperKind; 10] = [
        HyperKind::ClusterPrecision,
        HyperKind::SurveyPrecision,
        HyperKind::YearPrecision,
        HyperKind::TrendPrecision,
        HyperKind::StRange,
        HyperKind::StSigma,
        HyperKind::StRho,
        HyperKind::PeriodPrecision,
        HyperKind::SpatialRange,
        HyperKind::SpatialSigma,
    ];

    /// Internal value from the natural one (standard deviation, range or rho).
    pub fn to_internal(self, natural: f64) -> Result<f64> {
        let ok = match self {
            HyperKind::StRho => natural.abs() < 1.0,
            _ => natural > 0.0 && natural.is_finite(),
        };
        if !ok {
            return Err(Error::Domain(format!("invalid value {natural} for {}", self.name())));
        }
        Ok(match self {
            HyperKind::StRho => ((1.0 + natural) / (1.0 - natural)).ln(),
            k if k.is_precision() => -2.0 * natural.ln(),
            _ => natural.ln(),
        })
    }

    /// Natural value: standard deviation for precisions, otherwise range,
    /// sigma or rho.
    pub fn to_natural(self, theta: f64) -> f64 {
        match self {
            HyperKind::StRho => (theta / 2.0).tanh(),
            k if k.is_precision() => (-theta / 2.0).exp(),
            _ => theta.exp(),
        }
    }

    pub fn is_precision(self) -> bool {
        matches!(
            self,
            HyperKind::ClusterPrecision
                | HyperKind::SurveyPrecision
                | HyperKind::YearPrecision
                | HyperKind::TrendPrecision
                | HyperKind::PeriodPrecision
        )
    }
}

/// Index ranges of each latent block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub n: usize,
    /// Age-band intercepts.
    pub beta: Range<usize>,
    /// Rural effect (urban is the baseline).
    pub delta: Range<usize>,
    pub coef: Range<usize>,
    /// Three RW2 trends, trend-major then time.
    pub phi: Range<usize>,
    pub eps: Range<usize>,
    pub gamma: Range<usize>,
    pub upsilon: Range<usize>,
    pub eta: Range<usize>,
    pub spatial: Range<usize>,
    /// Space-time field, knot-major then mesh node.
    pub u: Range<usize>,
}

impl LatentLayout {
    fn new(sizes: [usize; 10]) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let beta = take(sizes[0]);
        let delta = take(sizes[1]);
        let coef = take(sizes[2]);
        let phi = take(sizes[3]);
        let eps = take(sizes[4]);
        let gamma = take(sizes[5]);
        let upsilon = take(sizes[6]);
        let eta = take(sizes[7]);
        let spatial = take(sizes[8]);
        let u = take(sizes[9]);
        Self {
            n: at,
            beta,
            delta,
            coef,
            phi,
            eps,
            gamma,
            upsilon,
            eta,
            spatial,
            u,
        }
    }
}

/// A fitted cluster as the model sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub cluster_id: ClusterId,
    pub survey_id: SurveyId,
    /// Index into [`ModelSpec::surveys`].
    pub survey: usize,
    pub province: ProvinceId,
    pub rural: bool,
    pub lon: f64,
    pub lat: f64,
    /// Bilinear weights over mesh nodes.
    pub nodes: Vec<(usize, f64)>,
}

/// Settings for building a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpecConfig {
    pub variant: Variant,
    /// First model year; defaults to the first data year.
    pub year_first: Option<i32>,
    /// Last model year; defaults to the later of the last data year and
    /// `forecast_to`.
    pub year_last: Option<i32>,
    pub forecast_to: i32,
    pub knot_step: i32,
    /// Periods of the covariate models.
    pub periods: Vec<YearRange>,
    pub priors: PriorSettings,
    /// Prior precision of intercepts and the rural effect.
    pub fixed_effect_precision: f64,
    /// Prior precision of covariate coefficients.
    pub coefficient_precision: f64,
    /// Diagonal added to intrinsic (RW) precisions.
    pub intrinsic_jitter: f64,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SpaceTime,
            year_first: None,
            year_last: None,
            forecast_to: 2020,
            knot_step: 5,
            periods: YearRange::bins(2000, 2014, 5),
            priors: PriorSettings::default(),
            fixed_effect_precision: 1e-3,
            coefficient_precision: 1e-3,
            intrinsic_jitter: 1e-6,
        }
    }
}

/// Everything needed to turn latent vectors into predictions, serialized
/// alongside posterior samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub time: TimeAxis,
    pub knots: Option<KnotSchedule>,
    pub domain: StudyDomain,
    /// Population density on mesh nodes (zero on padding).
    pub node_density: Vec<f64>,
    pub clusters: Vec<ClusterEntry>,
    pub surveys: Vec<SurveyId>,
    pub covariates: Option<CovariateDesign>,
    pub priors: PriorSettings,
    pub fixed_effect_precision: f64,
    #[serde(default = "default_coefficient_precision")]
    pub coefficient_precision: f64,
    pub intrinsic_jitter: f64,
    pub offsets: BiasOffsetTable,
    pub layout: LatentLayout,
    pub hyper: Vec<HyperKind>,
}

fn default_coefficient_precision() -> f64 {
    1e-3
}

/// Which hyperparameter function scales a precision term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coef {
    Fixed,
    Covariate,
    Jitter,
    Trend,
    Cluster,
    Survey,
    Year,
    Period,
    /// AR(1) part (identity, interior diagonal, off-diagonal) times SPDE part
    /// (`C`, `G`, `G C^-1 G`).
    SpaceTime { ar: usize, sp: usize },
    Spatial { sp: usize },
}

/// `coefficient(theta) * S` for a fixed sparse `S`, stored as upper-triangle
/// triplets in global latent indices.
#[derive(Debug, Clone)]
pub struct PrecisionTerm {
    pub coef: Coef,
    pub entries: Vec<(usize, usize, f64)>,
}

/// Binomial cells and their design rows.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub n_latent: usize,
    pub deaths: Vec<f64>,
    pub exposure: Vec<f64>,
    pub offset: Vec<f64>,
    /// CSR rows of the design matrix, sorted by column within each row.
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub rows: Vec<RowInfo>,
}

/// Identity of a binomial cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowInfo {
    pub cluster: usize,
    /// Time index on the model's axis.
    pub time: usize,
    pub band: usize,
}

impl ModelData {
    pub fn n_rows(&self) -> usize {
        self.deaths.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    /// Linear predictor of every row, offset included.
    pub fn predictor(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .map(|r| {
                let (c, v) = self.row(r);
                self.offset[r] + c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum::<f64>()
            })
            .collect()
    }

    /// `A' y`
    pub fn tr_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_latent];
        for (r, &yr) in y.iter().enumerate() {
            let (c, v) = self.row(r);
            for (&j, &a) in c.iter().zip(v) {
                out[j] += a * yr;
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.deaths.is_empty()
    }

    /// A data set with no observations.
    pub fn empty(n_latent: usize) -> Self {
        Self {
            n_latent,
            deaths: vec![],
            exposure: vec![],
            offset: vec![],
            row_ptr: vec![0],
            col_idx: vec![],
            values: vec![],
            rows: vec![],
        }
    }
}

/// Inputs to [`ModelSpec::build`].
pub struct SpecInputs<'a> {
    pub domain: StudyDomain,
    pub density: &'a AsciiGrid,
    pub table: &'a ExposureTable,
    pub offsets: BiasOffsetTable,
    pub covariates: &'a [CovariateLayer],
}

impl ModelSpec {
    /// Lays out the latent field for `inputs` and builds the binomial design.
    pub fn build(cfg: &SpecConfig, inputs: SpecInputs<'_>) -> Result<(ModelSpec, ModelData)> {
        let SpecInputs {
            domain,
            density,
            table,
            offsets,
            covariates,
        } = inputs;
        if table.cells.is_empty() {
            return Err(Error::Model("no person-months to fit".into()));
        }
        if cfg.variant.has_covariates() && covariates.is_empty() {
            return Err(Error::Model(format!("variant {} needs at least one covariate", cfg.variant)));
        }
        if !(cfg.fixed_effect_precision > 0.0 && cfg.coefficient_precision > 0.0 && cfg.intrinsic_jitter > 0.0) {
            return Err(Error::Model("fixed-effect precision and jitter must be positive".into()));
        }
        let node_density = domain.mesh_values(density)?;

        let (time, knots) = if cfg.variant.is_period_model() {
            if cfg.periods.len() < 2 {
                return Err(Error::Model("period models need at least two periods".into()));
            }
            (TimeAxis::Periods(cfg.periods.clone()), None)
        } else {
            let (lo, hi) = table.year_span().expect("nonempty table");
            let first = cfg.year_first.unwrap_or(lo);
            let last = cfg.year_last.unwrap_or(hi.max(cfg.forecast_to));
            if lo < first || hi > last {
                return Err(Error::Model(format!(
                    "data years {lo}..={hi} fall outside the model years {first}..={last}"
                )));
            }
            if last - first < 2 {
                return Err(Error::Model("the yearly model needs at least three years".into()));
            }
            if cfg.knot_step <= 0 {
                return Err(Error::Model("knot step must be positive".into()));
            }
            let n_steps = (last - first + cfg.knot_step - 1) / cfg.knot_step;
            let knots = KnotSchedule::regular(first, first + n_steps.max(1) * cfg.knot_step, cfg.knot_step)?;
            (TimeAxis::Years { first, last }, Some(knots))
        };

        let mut surveys: Vec<SurveyId> = table.clusters.iter().map(|c| c.survey_id).collect();
        surveys.sort_unstable();
        surveys.dedup();
        let mut clusters = Vec::with_capacity(table.clusters.len());
        for c in &table.clusters {
            let nodes = domain.mesh.interpolation_weights(c.lon, c.lat).map_err(|_| {
                Error::Model(format!(
                    "cluster {} at ({}, {}) lies outside the study mesh",
                    c.cluster_id, c.lon, c.lat
                ))
            })?;
            clusters.push(ClusterEntry {
                cluster_id: c.cluster_id,
                survey_id: c.survey_id,
                survey: surveys.binary_search(&c.survey_id).expect("survey listed"),
                province: c.province,
                rural: !c.urban,
                lon: c.lon,
                lat: c.lat,
                nodes,
            });
        }

        let n_t = time.len();
        let covariate_design = if cfg.variant.has_covariates() {
            let locs: Vec<_> = clusters.iter().map(|c| (c.cluster_id, c.lon, c.lat)).collect();
            Some(CovariateDesign::build(covariates, &locs, n_t, domain.grid.n_cells())?)
        } else {
            None
        };
        let n_nodes = domain.mesh.n_nodes();
        let st = cfg.variant == Variant::SpaceTime;
        let layout = LatentLayout::new([
            N_BANDS,
            1,
            covariate_design.as_ref().map_or(0, |d| d.len()),
            if st { N_TRENDS * n_t } else { 0 },
            if st { n_t } else { 0 },
            if st { 0 } else { n_t },
            surveys.len(),
            clusters.len(),
            if cfg.variant.has_spatial() { n_nodes } else { 0 },
            knots.as_ref().map_or(0, |k| k.len() * n_nodes),
        ]);
        let mut hyper = vec![HyperKind::ClusterPrecision, HyperKind::SurveyPrecision];
        if st {
            hyper.extend([
                HyperKind::YearPrecision,
                HyperKind::TrendPrecision,
                HyperKind::StRange,
                HyperKind::StSigma,
                HyperKind::StRho,
            ]);
        } else {
            hyper.push(HyperKind::PeriodPrecision);
            if cfg.variant.has_spatial() {
                hyper.extend([HyperKind::SpatialRange, HyperKind::SpatialSigma]);
            }
        }

        let spec = ModelSpec {
            variant: cfg.variant,
            time,
            knots,
            domain,
            node_density,
            clusters,
            surveys,
            covariates: covariate_design,
            priors: cfg.priors,
            fixed_effect_precision: cfg.fixed_effect_precision,
            coefficient_precision: cfg.coefficient_precision,
            intrinsic_jitter: cfg.intrinsic_jitter,
            offsets,
            layout,
            hyper,
        };
        let data = spec.design(table)?;
        Ok((spec, data))
    }

    pub fn n_latent(&self) -> usize {
        self.layout.n
    }

    pub fn n_time(&self) -> usize {
        self.time.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.domain.mesh.n_nodes()
    }

    /// Design entries `(latent index, coefficient)` for a cell of cluster
    /// `cluster` (index into [`Self::clusters`]) in calendar year `year`,
    /// age band position `band` (0-based), sorted by index.
    pub fn row_entries(&self, cluster: usize, year: i32, band: usize) -> Result<Vec<(usize, f64)>> {
        let c = self.clusters.get(cluster).ok_or_else(|| {
            Error::Model(format!("cluster index {cluster} outside the model"))
        })?;
        if band >= N_BANDS {
            return Err(Error::Model(format!("age band position {band} out of range")));
        }
        let t = self
            .time
            .index_of(year)
            .ok_or_else(|| Error::Model(format!("year {year} is not mapped by the model time axis")))?;
        let l = &self.layout;
        let mut e = Vec::with_capacity(16);
        e.push((l.beta.start + band, 1.0));
        if c.rural {
            e.push((l.delta.start, 1.0));
        }
        e.push((l.eta.start + cluster, 1.0));
        e.push((l.upsilon.start + c.survey, 1.0));
        match self.variant {
            Variant::SpaceTime => {
                let n_t = self.n_time();
                e.push((l.phi.start + BAND_TREND[band] * n_t + t, 1.0));
                e.push((l.eps.start + t, 1.0));
                let knots = self.knots.as_ref().expect("space-time model has knots");
                let n_s = self.n_nodes();
                for (k, wk) in knots.weights(year)? {
                    if wk == 0.0 {
                        continue;
                    }
                    for &(s, ws) in &c.nodes {
                        e.push((l.u.start + k * n_s + s, wk * ws));
                    }
                }
            }
            _ => {
                e.push((l.gamma.start + t, 1.0));
                if let Some(cov) = &self.covariates {
                    for (k, &x) in cov.cluster_values[cluster][t].iter().enumerate() {
                        e.push((l.coef.start + k, x));
                    }
                }
                if self.variant.has_spatial() {
                    for &(s, ws) in &c.nodes {
                        e.push((l.spatial.start + s, ws));
                    }
                }
            }
        }
        e.sort_by_key(|p| p.0);
        e.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        Ok(e)
    }

    /// The log offset for a cluster in a calendar year.
    pub fn offset(&self, cluster: usize, year: i32) -> f64 {
        let c = &self.clusters[cluster];
        self.offsets.log_offset(c.province, c.survey_id, year)
    }

    /// Logit hazard of one person-month under latent vector `x`.
    pub fn assemble_linear_predictor(&self, pm: &PersonMonth, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_latent() {
            return Err(Error::Model(format!(
                "latent vector has length {} but the model has {}",
                x.len(),
                self.n_latent()
            )));
        }
        let cluster = self
            .clusters
            .iter()
            .position(|c| c.cluster_id == pm.cluster_id && c.survey_id == pm.survey_id)
            .ok_or_else(|| {
                Error::Model(format!(
                    "cluster {} of survey {} is not in the model",
                    pm.cluster_id, pm.survey_id
                ))
            })?;
        let row = self.row_entries(cluster, pm.year, pm.band.position())?;
        Ok(self.offset(cluster, pm.year) + row.iter().map(|&(j, a)| a * x[j]).sum::<f64>())
    }

    /// Binomial cells of `table`, whose clusters must be the ones the spec
    /// was built from.
    pub fn design(&self, table: &ExposureTable) -> Result<ModelData> {
        if table.clusters.len() != self.clusters.len()
            || table
                .clusters
                .iter()
                .zip(&self.clusters)
                .any(|(a, b)| a.cluster_id != b.cluster_id || a.survey_id != b.survey_id)
        {
            return Err(Error::Model("exposure table clusters do not match the model".into()));
        }
        // key -> (deaths, exposure, exposure-weighted offset, representative year)
        let mut cells: BTreeMap<(usize, usize, usize), (f64, f64, f64, i32)> = BTreeMap::new();
        let mut missing_offsets = 0usize;
        let mut dropped = 0u64;
        for cell in &table.cells {
            let Some(t) = self.time.index_of(cell.year) else {
                if self.variant.is_period_model() {
                    dropped += cell.exposure as u64;
                    continue;
                }
                return Err(Error::Model(format!(
                    "year {} is not mapped by the model time axis",
                    cell.year
                )));
            };
            let c = &self.clusters[cell.cluster];
            if !self.offsets.is_empty() && self.offsets.get(c.province, c.survey_id, cell.year).is_none() {
                missing_offsets += 1;
            }
            let off = self.offset(cell.cluster, cell.year);
            let e = cells.entry((cell.cluster, t, cell.band)).or_insert((0.0, 0.0, 0.0, cell.year));
            e.0 += cell.deaths as f64;
            e.1 += cell.exposure as f64;
            e.2 += cell.exposure as f64 * off;
        }
        if missing_offsets > 0 {
            log::warn!("{missing_offsets} cells have no bias ratio; using ratio 1");
        }
        if dropped > 0 {
            log::info!("{dropped} person-months fall outside the model periods and were dropped");
        }
        let mut data = ModelData::empty(self.n_latent());
        for ((cluster, t, band), (d, n, off, year)) in cells {
            let entries = self.row_entries(cluster, year, band)?;
            data.deaths.push(d);
            data.exposure.push(n);
            data.offset.push(off / n);
            for (j, a) in entries {
                data.col_idx.push(j);
                data.values.push(a);
            }
            data.row_ptr.push(data.col_idx.len());
            data.rows.push(RowInfo { cluster, time: t, band });
        }
        Ok(data)
    }

    /// Hyperparameters in natural units from a full internal vector ordered
    /// as [`Self::hyper`].
    pub fn hyperparameters(&self, theta: &[f64]) -> Result<Hyperparameters> {
        if theta.len() != self.hyper.len() {
            return Err(Error::Model(format!(
                "expected {} hyperparameters, got {}",
                self.hyper.len(),
                theta.len()
            )));
        }
        let get = |k: HyperKind| {
            self.hyper
                .iter()
                .position(|&h| h == k)
                .map(|i| k.to_natural(theta[i]))
        };
        let h = Hyperparameters {
            sigma_cluster: get(HyperKind::ClusterPrecision),
            sigma_survey: get(HyperKind::SurveyPrecision),
            sigma_year: get(HyperKind::YearPrecision),
            sigma_rw2: get(HyperKind::TrendPrecision),
            space_time: match (get(HyperKind::StRange), get(HyperKind::StSigma), get(HyperKind::StRho)) {
                (Some(range), Some(sigma), Some(rho)) => Some(SpaceTimeParams { range, sigma, rho }),
                _ => None,
            },
            sigma_period: get(HyperKind::PeriodPrecision),
            spatial: get(HyperKind::SpatialRange).zip(get(HyperKind::SpatialSigma)),
        };
        h.validate()?;
        Ok(h)
    }

    /// Prior log density of the internal hyperparameter vector, Jacobians
    /// included.
    pub fn log_prior_theta(&self, theta: &[f64]) -> f64 {
        let p = &self.priors;
        self.hyper
            .iter()
            .zip(theta)
            .map(|(&k, &t)| match k {
                HyperKind::ClusterPrecision | HyperKind::SurveyPrecision | HyperKind::YearPrecision => {
                    p.iid.log_density_log_precision(t)
                }
                HyperKind::TrendPrecision | HyperKind::PeriodPrecision => p.rw.log_density_log_precision(t),
                HyperKind::StRange | HyperKind::SpatialRange => p.range.log_density(t.exp()) + t,
                HyperKind::StSigma | HyperKind::SpatialSigma => p.sigma.log_density(t.exp()) + t,
                HyperKind::StRho => {
                    let rho = k.to_natural(t);
                    p.rho.log_density(rho) + ((1.0 - rho * rho) / 2.0).ln()
                }
            })
            .sum()
    }

    /// A starting point for the hyperparameter search.
    pub fn default_theta(&self) -> Vec<f64> {
        let g = &self.domain.grid;
        let extent = (g.ncols.max(g.nrows) as f64) * g.cellsize;
        let range = (0.4 * extent).max(2.0 * g.cellsize);
        self.hyper
            .iter()
            .map(|&k| {
                let natural = match k {
                    HyperKind::ClusterPrecision => 0.3,
                    HyperKind::SurveyPrecision => 0.1,
                    HyperKind::YearPrecision => 0.1,
                    HyperKind::TrendPrecision => 0.05,
                    HyperKind::PeriodPrecision => 0.2,
                    HyperKind::StRange | HyperKind::SpatialRange => range,
                    HyperKind::StSigma | HyperKind::SpatialSigma => 0.5,
                    HyperKind::StRho => 0.8,
                };
                k.to_internal(natural).expect("defaults are valid")
            })
            .collect()
    }

    /// Plausible bounds on each internal hyperparameter; the search treats
    /// points outside as having zero posterior mass.
    pub fn theta_bounds(&self) -> Vec<(f64, f64)> {
        let g = &self.domain.grid;
        let extent = (g.ncols.max(g.nrows) as f64) * g.cellsize;
        self.hyper
            .iter()
            .map(|&k| match k {
                k if k.is_precision() => (-2.0 * 10f64.ln(), -2.0 * 1e-4f64.ln()),
                HyperKind::StRange | HyperKind::SpatialRange => {
                    ((0.5 * g.cellsize).ln(), (20.0 * extent).ln())
                }
                HyperKind::StSigma | HyperKind::SpatialSigma => (1e-3f64.ln(), 20f64.ln()),
                _ => (-12.0, 12.0),
            })
            .collect()
    }

    /// Fixed sparse pieces of the latent precision.
    pub fn precision_terms(&self) -> Result<Vec<PrecisionTerm>> {
        let l = &self.layout;
        let mut terms = Vec::new();
        let diag = |r: &Range<usize>| r.clone().map(|i| (i, i, 1.0)).collect::<Vec<_>>();
        let mut fixed = diag(&l.beta);
        fixed.extend(diag(&l.delta));
        terms.push(PrecisionTerm { coef: Coef::Fixed, entries: fixed });
        terms.push(PrecisionTerm { coef: Coef::Covariate, entries: diag(&l.coef) });
        terms.push(PrecisionTerm { coef: Coef::Cluster, entries: diag(&l.eta) });
        terms.push(PrecisionTerm { coef: Coef::Survey, entries: diag(&l.upsilon) });
        let n_t = self.n_time();
        let upper_block = |m: &CscMatrix, offset: usize| -> Vec<(usize, usize, f64)> {
            m.triplets()
                .into_iter()
                .filter(|&(i, j, _)| i <= j)
                .map(|(i, j, v)| (offset + i, offset + j, v))
                .collect()
        };
        if !l.phi.is_empty() {
            let r2 = random_walk_structure(n_t, 2)?;
            let mut e = Vec::new();
            for g in 0..N_TRENDS {
                e.extend(upper_block(&r2, l.phi.start + g * n_t));
            }
            terms.push(PrecisionTerm { coef: Coef::Trend, entries: e });
            terms.push(PrecisionTerm { coef: Coef::Jitter, entries: diag(&l.phi) });
            terms.push(PrecisionTerm { coef: Coef::Year, entries: diag(&l.eps) });
        }
        if !l.gamma.is_empty() {
            let r1 = random_walk_structure(n_t, 1)?;
            terms.push(PrecisionTerm { coef: Coef::Period, entries: upper_block(&r1, l.gamma.start) });
            terms.push(PrecisionTerm { coef: Coef::Jitter, entries: diag(&l.gamma) });
        }
        let spde = (!l.u.is_empty() || !l.spatial.is_empty()).then(|| self.domain.mesh.spde_components());
        if let Some(sp) = &spde {
            let parts = [&sp.c, &sp.g, &sp.g_cinv_g];
            if !l.spatial.is_empty() {
                for (i, m) in parts.iter().enumerate() {
                    terms.push(PrecisionTerm { coef: Coef::Spatial { sp: i }, entries: upper_block(m, l.spatial.start) });
                }
            }
            if !l.u.is_empty() {
                let k = self.knots.as_ref().expect("space-time model has knots").len();
                let eye = CscMatrix::identity(k);
                let interior: Vec<f64> = (0..k).map(|i| if i > 0 && i + 1 < k { 1.0 } else { 0.0 }).collect();
                let interior = CscMatrix::diagonal(&interior);
                let off_trip: Vec<_> = (0..k.saturating_sub(1))
                    .flat_map(|i| [(i, i + 1, 1.0), (i + 1, i, 1.0)])
                    .collect();
                let off = CscMatrix::from_triplets(k, k, &off_trip);
                for (a, t) in [&eye, &interior, &off].iter().enumerate() {
                    for (b, m) in parts.iter().enumerate() {
                        terms.push(PrecisionTerm {
                            coef: Coef::SpaceTime { ar: a, sp: b },
                            entries: upper_block(&t.kron(m), l.u.start),
                        });
                    }
                }
            }
        }
        terms.retain(|t| !t.entries.is_empty());
        Ok(terms)
    }

    /// Value of a precision coefficient.
    pub fn coefficient(&self, coef: Coef, h: &Hyperparameters) -> f64 {
        let prec = |s: Option<f64>| s.map_or(0.0, |s| s.powi(-2));
        match coef {
            Coef::Fixed => self.fixed_effect_precision,
            Coef::Covariate => self.coefficient_precision,
            Coef::Jitter => self.intrinsic_jitter,
            Coef::Trend => prec(h.sigma_rw2),
            Coef::Cluster => prec(h.sigma_cluster),
            Coef::Survey => prec(h.sigma_survey),
            Coef::Year => prec(h.sigma_year),
            Coef::Period => prec(h.sigma_period),
            Coef::SpaceTime { ar, sp } => {
                let st = h.space_time.expect("space-time parameters present");
                let s = 1.0 / (1.0 - st.rho * st.rho);
                let a = [s, s * st.rho * st.rho, -s * st.rho][ar];
                a * MaternParams { range: st.range, sigma: st.sigma }.coefficients()[sp]
            }
            Coef::Spatial { sp } => {
                let (range, sigma) = h.spatial.expect("spatial parameters present");
                MaternParams { range, sigma }.coefficients()[sp]
            }
        }
    }

    /// The full latent precision at `h`, both triangles.
    pub fn precision(&self, h: &Hyperparameters) -> Result<CscMatrix> {
        let mut trip = Vec::new();
        for t in self.precision_terms()? {
            let c = self.coefficient(t.coef, h);
            for &(i, j, v) in &t.entries {
                trip.push((i, j, c * v));
                if i != j {
                    trip.push((j, i, c * v));
                }
            }
        }
        Ok(CscMatrix::from_triplets(self.n_latent(), self.n_latent(), &trip))
    }

    /// Identifiability constraints: sum-to-zero on each RW trend and the
    /// period RW1, population-weighted integrate-to-zero on every knot of
    /// the space-time field and on the spatial field.
    pub fn constraints(&self) -> Result<ConstraintSet> {
        let l = &self.layout;
        let n_t = self.n_time();
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        if !l.phi.is_empty() {
            for g in 0..N_TRENDS {
                let start = l.phi.start + g * n_t;
                rows.push((start..start + n_t).map(|i| (i, 1.0)).collect());
            }
        }
        if !l.gamma.is_empty() {
            rows.push(l.gamma.clone().map(|i| (i, 1.0)).collect());
        }
        let total: f64 = self.node_density.iter().sum();
        let weights: Vec<(usize, f64)> = self
            .node_density
            .iter()
            .enumerate()
            .filter(|(_, d)| **d > 0.0)
            .map(|(s, d)| (s, d / total))
            .collect();
        if (!l.u.is_empty() || !l.spatial.is_empty()) && !(total > 0.0) {
            return Err(Error::Model("population density is zero everywhere".into()));
        }
        if !l.spatial.is_empty() {
            rows.push(weights.iter().map(|&(s, w)| (l.spatial.start + s, w)).collect());
        }
        if !l.u.is_empty() {
            let n_s = self.n_nodes();
            let k = self.knots.as_ref().expect("space-time model has knots").len();
            for kk in 0..k {
                rows.push(weights.iter().map(|&(s, w)| (l.u.start + kk * n_s + s, w)).collect());
            }
        }
        ConstraintSet::new(self.n_latent(), rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::testing::min_eigenvalue;
    use crate::hazard::{expit, AgeBand};
    use crate::model::testing;

    fn person_month(spec: &ModelSpec, cluster: usize, year: i32, band: u8) -> PersonMonth {
        let c = &spec.clusters[cluster];
        PersonMonth {
            child_id: 1,
            month: 0,
            band: AgeBand::new(band + 1).unwrap(),
            year,
            cluster_id: c.cluster_id,
            survey_id: c.survey_id,
            stratum_id: 0,
            died: false,
        }
    }

    fn urban_cluster(spec: &ModelSpec) -> usize {
        spec.clusters.iter().position(|c| !c.rural).unwrap()
    }

    #[test]
    fn blocks_partition_the_latent_vector() {
        for v in [Variant::SpaceTime, Variant::M2, Variant::M3, Variant::M4] {
            let (spec, _) = testing::build(v, 6, 1);
            let l = &spec.layout;
            let blocks = [
                &l.beta, &l.delta, &l.coef, &l.phi, &l.eps, &l.gamma, &l.upsilon, &l.eta, &l.spatial, &l.u,
            ];
            let mut owner = vec![0usize; l.n];
            for b in blocks {
                for i in b.clone() {
                    owner[i] += 1;
                }
            }
            assert!(owner.iter().all(|&c| c == 1), "{v}");
            assert_eq!(l.spatial.is_empty(), !v.has_spatial());
            assert_eq!(l.coef.is_empty(), !v.has_covariates());
        }
    }

    #[test]
    fn m2_adds_one_time_invariant_field() {
        let (base, _) = testing::build(Variant::M3, 6, 1);
        let (m2, _) = testing::build(Variant::M2, 6, 1);
        let (m4, _) = testing::build(Variant::M4, 6, 1);
        assert_eq!(m2.layout.spatial.len(), m2.n_nodes());
        assert_eq!(m4.layout.n, base.layout.n + m4.n_nodes());
        assert_eq!(m2.n_time(), 2);
    }

    #[test]
    fn intercept_only_predictor() {
        let (spec, _) = testing::build(Variant::SpaceTime, 6, 2);
        let mut x = vec![0.0; spec.n_latent()];
        x[spec.layout.beta.start] = -3.0;
        let c = urban_cluster(&spec);
        let eta = spec.assemble_linear_predictor(&person_month(&spec, c, 2004, 0), &x).unwrap();
        assert_eq!(eta, -3.0);
        assert!((expit(eta) - 0.047_425_873_177_566_78).abs() < 1e-15);
    }

    #[test]
    fn rural_records_add_delta() {
        let (spec, _) = testing::build(Variant::SpaceTime, 6, 2);
        let mut x = vec![0.0; spec.n_latent()];
        x[spec.layout.delta.start] = 0.08;
        let rural = spec.clusters.iter().position(|c| c.rural).unwrap();
        let u = urban_cluster(&spec);
        assert_eq!(spec.assemble_linear_predictor(&person_month(&spec, rural, 2001, 2), &x).unwrap(), 0.08);
        assert_eq!(spec.assemble_linear_predictor(&person_month(&spec, u, 2001, 2), &x).unwrap(), 0.0);
    }

    #[test]
    fn bias_ratio_lowers_the_observed_logit() {
        let table = testing::table(6, 3);
        let mut offsets = BiasOffsetTable::new();
        let c = table.clusters.iter().position(|c| c.urban).unwrap();
        let cl = &table.clusters[c];
        offsets.insert(cl.province, cl.survey_id, 2003, 1.1).unwrap();
        let (spec, _) = testing::build_with(Variant::SpaceTime, &table, offsets, &[]);
        let x = vec![0.0; spec.n_latent()];
        let eta = spec.assemble_linear_predictor(&person_month(&spec, c, 2003, 1), &x).unwrap();
        assert!((eta + 1.1f64.ln()).abs() < 1e-15);
        assert!((1.1f64.ln() - 0.0953).abs() < 1e-4);
        let other = spec.assemble_linear_predictor(&person_month(&spec, c, 2004, 1), &x).unwrap();
        assert_eq!(other, 0.0);
    }

    #[test]
    fn scaling_bias_shifts_affected_predictors_by_log_c() {
        let table = testing::table(8, 4);
        let mut offsets = BiasOffsetTable::new();
        for p in 1..=3 {
            for s in 1..=2 {
                for y in 2000..=2004 {
                    offsets.insert(p, s, y, 1.0 + 0.01 * (p + s) as f64 + 0.002 * (y - 2000) as f64).unwrap();
                }
            }
        }
        let c = 1.7;
        let (spec1, d1) = testing::build_with(Variant::SpaceTime, &table, offsets.clone(), &[]);
        let (_, d2) = testing::build_with(Variant::SpaceTime, &table, offsets.scaled(c).unwrap(), &[]);
        let x = testing::random_latent(spec1.n_latent(), 0.5, 9);
        let (e1, e2) = (d1.predictor(&x), d2.predictor(&x));
        let mut affected = 0;
        for (r, info) in d1.rows.iter().enumerate() {
            let year = match spec1.time {
                TimeAxis::Years { first, .. } => first + info.time as i32,
                _ => unreachable!(),
            };
            let shift = e1[r] - e2[r];
            if year <= 2004 {
                affected += 1;
                assert!((shift - c.ln()).abs() < 1e-12);
            } else {
                assert!(shift.abs() < 1e-12);
            }
        }
        assert!(affected > 0);
    }

    #[test]
    fn unmapped_year_is_an_error() {
        let (spec, _) = testing::build(Variant::SpaceTime, 4, 5);
        let x = vec![0.0; spec.n_latent()];
        assert!(spec.assemble_linear_predictor(&person_month(&spec, 0, 1990, 0), &x).is_err());
        let mut pm = person_month(&spec, 0, 2001, 0);
        pm.cluster_id = 999;
        assert!(spec.assemble_linear_predictor(&pm, &x).is_err());
    }

    #[test]
    fn design_rows_match_the_predictor() {
        let (spec, data) = testing::build(Variant::SpaceTime, 5, 6);
        let x = testing::random_latent(spec.n_latent(), 1.0, 2);
        let eta = data.predictor(&x);
        for (r, info) in data.rows.iter().enumerate() {
            let pm = person_month(&spec, info.cluster, 2000 + info.time as i32, info.band as u8);
            let direct = spec.assemble_linear_predictor(&pm, &x).unwrap();
            assert!((direct - eta[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn period_models_drop_outside_years_and_pool_cells() {
        let table = testing::table(5, 7);
        let (spec, data) = testing::build_with(Variant::M2, &table, BiasOffsetTable::new(), &[]);
        let kept: f64 = data.exposure.iter().sum();
        let all: u32 = table.cells.iter().map(|c| c.exposure).sum();
        assert_eq!(kept, all as f64);
        assert!(data.rows.iter().all(|r| r.time < 2));
        assert_eq!(spec.n_time(), 2);
        // one row per (cluster, period, band)
        let mut keys: Vec<_> = data.rows.iter().map(|r| (r.cluster, r.time, r.band)).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), data.n_rows());
    }

    #[test]
    fn prior_precision_is_positive_definite() {
        for v in [Variant::SpaceTime, Variant::M2, Variant::M4] {
            let (spec, _) = testing::build(v, 4, 8);
            let q = spec.precision(&spec.hyperparameters(&spec.default_theta()).unwrap()).unwrap();
            assert!(q.asymmetry() < 1e-12);
            assert!(min_eigenvalue(&q) > 0.0, "{v}");
        }
    }

    #[test]
    fn constraint_count() {
        let (spec, _) = testing::build(Variant::SpaceTime, 4, 8);
        let k = spec.knots.as_ref().unwrap().len();
        assert_eq!(spec.constraints().unwrap().n_constraints(), N_TRENDS + k);
        let (m4, _) = testing::build(Variant::M4, 4, 8);
        assert_eq!(m4.constraints().unwrap().n_constraints(), 2);
    }

    #[test]
    fn hyper_transforms_round_trip() {
        for k in HyperKind::ALL {
            let v = if k == HyperKind::StRho { -0.4 } else { 0.37 };
            let t = k.to_internal(v).unwrap();
            assert!((k.to_natural(t) - v).abs() < 1e-12, "{}", k.name());
            assert_eq!(HyperKind::from_name(k.name()), Some(k));
        }
    }

    #[test]
    fn theta_prior_integrates_rho_jacobian() {
        // density of theta for rho, integrated over the real line, is 1
        let p = PriorSettings::default();
        let f = |t: f64| {
            let rho = HyperKind::StRho.to_natural(t);
            (p.rho.log_density(rho) + ((1.0 - rho * rho) / 2.0).ln()).exp()
        };
        let (a, b, n) = (-30.0, 30.0, 60_000);
        let h = (b - a) / n as f64;
        let total: f64 = (0..n).map(|i| f(a + (i as f64 + 0.5) * h) * h).sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }
}
