//! Weighted (direct) U5MR estimation and delete-one-cluster jackknife
//! variance on the logit scale.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AreaId, Cluster, ExposureTable, SurveyDataset};
use crate::error::{Error, Result};
use crate::hazard::{logit, u5mr_from_hazards, HazardVector, StratumId, SurveyId, N_BANDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AreaSelection {
    National,
    Area(AreaId),
}

impl AreaSelection {
    fn contains(&self, c: &Cluster) -> bool {
        match self {
            AreaSelection::National => true,
            AreaSelection::Area(a) => c.area == *a,
        }
    }
}

impl fmt::Display for AreaSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AreaSelection::National => write!(f, "national"),
            AreaSelection::Area(a) => write!(f, "{a}"),
        }
    }
}

/// Inclusive range of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearRange {
    pub start: i32,
    pub end: i32,
}

impl YearRange {
    pub fn new(start: i32, end: i32) -> Result<Self> {
        if end < start {
            return Err(Error::Validation(format!("empty year range {start}-{end}")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.start..=self.end).contains(&year)
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.start..=self.end
    }

    /// Consecutive bins of `width` years starting at `first`.
    pub fn bins(first: i32, last: i32, width: i32) -> Vec<YearRange> {
        (first..=last)
            .step_by(width.max(1) as usize)
            .map(|s| YearRange {
                start: s,
                end: (s + width - 1).min(last),
            })
            .collect()
    }
}

impl fmt::Display for YearRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

impl std::str::FromStr for YearRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::Validation(format!("period `{s}` is not `start-end`")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<i32>()
                .map_err(|_| Error::Validation(format!("bad year `{v}` in period `{s}`")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

/// How person-months from several surveys are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pooling {
    /// One estimator over all person-months with the supplied weights.
    #[default]
    Pooled,
    /// Average of per-survey logit estimates; variance `sum V_k / K^2`.
    SurveyAverage,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pooled" => Ok(Pooling::Pooled),
            "survey_average" => Ok(Pooling::SurveyAverage),
            other => Err(format!("unknown pooling `{other}` (pooled | survey_average)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DirectOptions {
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateFlag {
    Ok,
    /// Zero deaths: the logit is undefined.
    Degenerate,
    /// Estimate available but fewer than two clusters contribute.
    VarianceNotEstimable,
}

impl fmt::Display for EstimateFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EstimateFlag::Ok => "ok",
            EstimateFlag::Degenerate => "degenerate: logit undefined",
            EstimateFlag::VarianceNotEstimable => "variance not estimable",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub area: AreaSelection,
    pub period: YearRange,
    pub u5mr: f64,
    pub logit_u5mr: Option<f64>,
    pub logit_variance: Option<f64>,
    pub flag: EstimateFlag,
}

/// Per-cluster band totals plus the design keys needed for the jackknife.
struct Tally {
    stratum: (SurveyId, StratumId),
    weight: f64,
    deaths: [f64; N_BANDS],
    exposure: [f64; N_BANDS],
}

fn tallies(table: &ExposureTable, area: AreaSelection, period: YearRange, survey: Option<SurveyId>) -> Vec<Tally> {
    table
        .cluster_band_totals(|c, year| {
            area.contains(c) && period.contains(year) && survey.is_none_or(|s| c.survey_id == s)
        })
        .into_iter()
        .map(|(idx, (deaths, exposure))| {
            let c = &table.clusters[idx];
            Tally {
                stratum: (c.survey_id, c.stratum_id),
                weight: c.weight,
                deaths,
                exposure,
            }
        })
        .collect()
}

/// `q_a = sum w y / sum w` per band, combined by the product formula.
/// `None` when some band has no exposure.
fn estimate(tallies: &[Tally], multiplier: impl Fn(usize) -> f64) -> Option<f64> {
    let mut num = [0.0; N_BANDS];
    let mut den = [0.0; N_BANDS];
    for (i, t) in tallies.iter().enumerate() {
        let w = t.weight * multiplier(i);
        for a in 0..N_BANDS {
            num[a] += w * t.deaths[a];
            den[a] += w * t.exposure[a];
        }
    }
    let mut q = [0.0; N_BANDS];
    for a in 0..N_BANDS {
        if den[a] <= 0.0 {
            return None;
        }
        q[a] = num[a] / den[a];
    }
    Some(u5mr_from_hazards(&HazardVector::new(q).ok()?))
}

fn jackknife(tallies: &[Tally]) -> Result<f64> {
    if tallies.len() < 2 {
        return Err(Error::VarianceNotEstimable(format!(
            "{} contributing cluster(s)",
            tallies.len()
        )));
    }
    let mut strata: BTreeMap<(SurveyId, StratumId), Vec<usize>> = BTreeMap::new();
    for (i, t) in tallies.iter().enumerate() {
        strata.entry(t.stratum).or_default().push(i);
    }
    if strata.values().all(|m| m.len() < 2) {
        return Err(Error::VarianceNotEstimable(
            "no stratum has two contributing clusters".into(),
        ));
    }
    let mut variance = 0.0;
    for members in strata.values() {
        let n_h = members.len();
        if n_h < 2 {
            continue;
        }
        let inflate = n_h as f64 / (n_h as f64 - 1.0);
        let mut reps = Vec::with_capacity(n_h);
        for &drop in members {
            let u = estimate(tallies, |i| {
                if i == drop {
                    0.0
                } else if tallies[i].stratum == tallies[drop].stratum {
                    inflate
                } else {
                    1.0
                }
            })
            .ok_or_else(|| Error::VarianceNotEstimable("replicate loses all exposure in a band".into()))?;
            reps.push(logit(u).map_err(|_| {
                Error::VarianceNotEstimable("a delete-one replicate has zero deaths".into())
            })?);
        }
        let mean = reps.iter().sum::<f64>() / n_h as f64;
        let ss: f64 = reps.iter().map(|r| (r - mean).powi(2)).sum();
        variance += (n_h as f64 - 1.0) / n_h as f64 * ss;
    }
    Ok(variance)
}

fn single_estimate(table: &ExposureTable, area: AreaSelection, period: YearRange, survey: Option<SurveyId>) -> Result<DirectEstimate> {
    let t = tallies(table, area, period, survey);
    let total: f64 = t.iter().flat_map(|x| x.exposure).sum();
    if total == 0.0 {
        return Err(Error::Survey(format!("no person-months in area {area}, period {period}")));
    }
    let u5mr = estimate(&t, |_| 1.0).ok_or_else(|| {
        Error::Survey(format!("area {area}, period {period}: some age band has no exposure"))
    })?;
    let logit_u5mr = logit(u5mr).ok();
    if logit_u5mr.is_none() {
        return Ok(DirectEstimate {
            area,
            period,
            u5mr,
            logit_u5mr: None,
            logit_variance: None,
            flag: EstimateFlag::Degenerate,
        });
    }
    let (logit_variance, flag) = match jackknife(&t) {
        Ok(v) => (Some(v), EstimateFlag::Ok),
        Err(Error::VarianceNotEstimable(_)) => (None, EstimateFlag::VarianceNotEstimable),
        Err(e) => return Err(e),
    };
    Ok(DirectEstimate {
        area,
        period,
        u5mr,
        logit_u5mr,
        logit_variance,
        flag,
    })
}

/// Direct estimate from a precomputed exposure table.
pub fn direct_from_table(
    table: &ExposureTable,
    area: AreaSelection,
    period: YearRange,
    options: DirectOptions,
) -> Result<DirectEstimate> {
    match options.pooling {
        Pooling::Pooled => single_estimate(table, area, period, None),
        Pooling::SurveyAverage => {
            let surveys: std::collections::BTreeSet<SurveyId> =
                table.clusters.iter().map(|c| c.survey_id).collect();
            let mut parts = Vec::new();
            for s in surveys {
                match single_estimate(table, area, period, Some(s)) {
                    Ok(e) => parts.push(e),
                    Err(Error::Survey(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            if parts.is_empty() {
                return Err(Error::Survey(format!("no person-months in area {area}, period {period}")));
            }
            let k = parts.len() as f64;
            if parts.iter().any(|p| p.flag == EstimateFlag::Degenerate) {
                let u5mr = parts.iter().map(|p| p.u5mr).sum::<f64>() / k;
                let flag = if u5mr == 0.0 { EstimateFlag::Degenerate } else { EstimateFlag::VarianceNotEstimable };
                return Ok(DirectEstimate {
                    area,
                    period,
                    u5mr,
                    logit_u5mr: logit(u5mr).ok(),
                    logit_variance: None,
                    flag,
                });
            }
            let mean_logit = parts.iter().filter_map(|p| p.logit_u5mr).sum::<f64>() / k;
            let variance = parts
                .iter()
                .map(|p| p.logit_variance)
                .sum::<Option<f64>>()
                .map(|v| v / (k * k));
            Ok(DirectEstimate {
                area,
                period,
                u5mr: crate::hazard::expit(mean_logit),
                logit_u5mr: Some(mean_logit),
                logit_variance: variance,
                flag: if variance.is_some() { EstimateFlag::Ok } else { EstimateFlag::VarianceNotEstimable },
            })
        }
    }
}

/// Weighted U5MR for `area` over `period`, with jackknife logit variance.
pub fn direct_u5mr(
    data: &[SurveyDataset],
    area: AreaSelection,
    period: YearRange,
    options: DirectOptions,
) -> Result<DirectEstimate> {
    direct_from_table(&ExposureTable::from_surveys(data)?, area, period, options)
}

pub fn jackknife_from_table(table: &ExposureTable, area: AreaSelection, period: YearRange) -> Result<f64> {
    let t = tallies(table, area, period, None);
    let u = estimate(&t, |_| 1.0)
        .ok_or_else(|| Error::Survey(format!("no exposure in area {area}, period {period}")))?;
    logit(u).map_err(|_| Error::VarianceNotEstimable("estimate is degenerate".into()))?;
    jackknife(&t)
}

/// Delete-one-cluster jackknife within strata on the logit of the pooled
/// direct estimate: `V = sum_h (n_h - 1)/n_h sum_j (theta_(hj) - mean_h)^2`.
/// Strata with a single contributing cluster add nothing.
pub fn jackknife_variance(data: &[SurveyDataset], area: AreaSelection, period: YearRange) -> Result<f64> {
    jackknife_from_table(&ExposureTable::from_surveys(data)?, area, period)
}
