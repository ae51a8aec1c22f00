//! Holdout comparison of estimators, and information criteria for choosing
//! between fitted models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::CountySeries;
use crate::error::{Error, Result};
use crate::gmrf::{AsciiGrid, StudyDomain};
use crate::hazard::logit;
use crate::io::{write_atomic_str, write_csv};
use crate::model::{
    fit, pointwise_log_likelihood, BiasOffsetTable, CovariateLayer, FitOptions, FitResult, ModelData, ModelSpec,
    SpecConfig, SpecInputs,
};
use crate::survey::{DirectEstimate, ExposureTable, YearRange};

/// Minimum number of posterior samples for the information criteria.
pub const MIN_SAMPLES: usize = 100;
/// Largest candidate set `covariate_search` will enumerate.
pub const MAX_CANDIDATES: usize = 12;

/// One model's estimate of an area-period value on the logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEstimate {
    pub model: String,
    pub area: String,
    pub period: YearRange,
    pub mean: f64,
    pub variance: f64,
    /// Logit samples, when the estimate is a posterior.
    pub samples: Option<Vec<f64>>,
}

impl ModelEstimate {
    /// Posterior estimate from U5MR samples; mean and variance use the
    /// same samples, the variance with divisor `n`.
    pub fn from_u5mr_samples(model: &str, area: &str, period: YearRange, u5mr: &[f64]) -> Result<Self> {
        if u5mr.is_empty() {
            return Err(Error::Evaluate(format!("no samples for {model}, area {area}, {period}")));
        }
        let s = u5mr.iter().map(|&p| logit(p)).collect::<Result<Vec<f64>>>()?;
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let variance = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            model: model.into(),
            area: area.into(),
            period,
            mean,
            variance,
            samples: Some(s),
        })
    }

    /// Design-based estimate with its jackknife variance; `None` when the
    /// logit is undefined.
    pub fn from_direct(model: &str, area: &str, est: &DirectEstimate) -> Option<Self> {
        Some(Self {
            model: model.into(),
            area: area.into(),
            period: est.period,
            mean: est.logit_u5mr?,
            variance: est.logit_variance.unwrap_or(0.0),
            samples: None,
        })
    }
}

/// Held-out direct estimate playing the role of truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TestValue {
    pub area: String,
    pub period: YearRange,
    /// `None` when the holdout estimate is degenerate.
    pub logit: Option<f64>,
}

/// Period-level posterior estimates: each sample's yearly region values
/// are averaged over the years of the period present in `series`.
pub fn period_estimates(model: &str, series: &[CountySeries], periods: &[YearRange]) -> Result<Vec<ModelEstimate>> {
    let mut out = Vec::new();
    for &p in periods {
        let years: Vec<&CountySeries> = series.iter().filter(|s| p.contains(s.year)).collect();
        let Some(first) = years.first() else {
            continue;
        };
        for (r, id) in first.ids.iter().enumerate() {
            let n = first.samples[r].len();
            let mut avg = vec![0.0; n];
            for s in &years {
                let v = s
                    .region(id)
                    .filter(|v| v.len() == n)
                    .ok_or_else(|| Error::Evaluate(format!("region {id} lacks matched samples in {}", s.year)))?;
                avg.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
            avg.iter_mut().for_each(|a| *a /= years.len() as f64);
            out.push(ModelEstimate::from_u5mr_samples(model, id, p, &avg)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub model: String,
    pub area: String,
    pub period: String,
    pub estimate: f64,
    pub truth: f64,
    pub bias2: f64,
    pub variance: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodScore {
    pub model: String,
    pub period: String,
    pub mse: f64,
    pub bias2: f64,
    pub variance: f64,
    pub n_areas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub split_seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub meta: ReportMeta,
    pub cells: Vec<CellScore>,
    pub periods: Vec<PeriodScore>,
    /// Area-period cells excluded because a model or the holdout lacks a
    /// value.
    pub missing: Vec<String>,
    pub criteria: BTreeMap<String, InformationCriteria>,
}

/// Mean squared error of every model against held-out direct estimates,
/// per period, over the area-periods every model and the holdout cover.
/// Each cell's error splits into squared bias and variance.
pub fn holdout_mse(
    estimates: &[ModelEstimate],
    truth: &[TestValue],
    periods: &[YearRange],
    meta: ReportMeta,
) -> Result<ComparisonReport> {
    let models: BTreeSet<&str> = estimates.iter().map(|e| e.model.as_str()).collect();
    if models.is_empty() {
        return Err(Error::Evaluate("no model estimates to compare".into()));
    }
    let mut by: BTreeMap<(&str, &str, YearRange), &ModelEstimate> = BTreeMap::new();
    for e in estimates {
        if by.insert((e.model.as_str(), e.area.as_str(), e.period), e).is_some() {
            return Err(Error::Evaluate(format!(
                "duplicate estimate for {}, area {}, {}",
                e.model, e.area, e.period
            )));
        }
    }
    let mut truth_by: BTreeMap<(YearRange, &str), Option<f64>> = BTreeMap::new();
    for t in truth {
        if periods.contains(&t.period) {
            truth_by.insert((t.period, t.area.as_str()), t.logit);
        }
    }
    let mut cells = Vec::new();
    let mut missing = Vec::new();
    for (&(period, area), &y) in &truth_by {
        let Some(y) = y.filter(|v| v.is_finite()) else {
            missing.push(format!("area {area}, {period}: holdout estimate degenerate"));
            continue;
        };
        let absent: Vec<&str> = models
            .iter()
            .copied()
            .filter(|m| !by.contains_key(&(*m, area, period)))
            .collect();
        if !absent.is_empty() {
            missing.push(format!("area {area}, {period}: no estimate from {}", absent.join(", ")));
            continue;
        }
        for &m in &models {
            let e = by[&(m, area, period)];
            let bias2 = (e.mean - y).powi(2);
            let mse = match &e.samples {
                Some(s) => s.iter().map(|v| (v - y).powi(2)).sum::<f64>() / s.len() as f64,
                None => bias2 + e.variance,
            };
            cells.push(CellScore {
                model: m.to_string(),
                area: area.to_string(),
                period: period.to_string(),
                estimate: e.mean,
                truth: y,
                bias2,
                variance: e.variance,
                mse,
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::Evaluate("no area-period cells are covered by every model and the holdout".into()));
    }
    let mut periods_out = Vec::new();
    for &p in periods {
        let ps = p.to_string();
        for &m in &models {
            let these: Vec<&CellScore> = cells.iter().filter(|c| c.model == m && c.period == ps).collect();
            if these.is_empty() {
                continue;
            }
            let n = these.len() as f64;
            periods_out.push(PeriodScore {
                model: m.to_string(),
                period: ps.clone(),
                mse: these.iter().map(|c| c.mse).sum::<f64>() / n,
                bias2: these.iter().map(|c| c.bias2).sum::<f64>() / n,
                variance: these.iter().map(|c| c.variance).sum::<f64>() / n,
                n_areas: these.len(),
            });
        }
    }
    if !missing.is_empty() {
        log::warn!("{} area-period cells excluded from the holdout comparison", missing.len());
    }
    Ok(ComparisonReport {
        meta,
        cells,
        periods: periods_out,
        missing,
        criteria: BTreeMap::new(),
    })
}

impl ComparisonReport {
    pub fn period(&self, model: &str, period: YearRange) -> Option<&PeriodScore> {
        let p = period.to_string();
        self.periods.iter().find(|s| s.model == model && s.period == p)
    }

    /// True when `better` has lower MSE than `worse` in every period both
    /// cover, and they share at least one.
    pub fn dominates(&self, better: &str, worse: &str) -> bool {
        let mut any = false;
        for b in self.periods.iter().filter(|s| s.model == better) {
            if let Some(w) = self.periods.iter().find(|s| s.model == worse && s.period == b.period) {
                any = true;
                if !(b.mse < w.mse) {
                    return false;
                }
            }
        }
        any
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.periods)
    }

    pub fn write_cells_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.cells)
    }

    /// `model,period,component,value` rows for `mse`, `bias2` and
    /// `variance`.
    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            model: &'a str,
            period: &'a str,
            component: &'static str,
            value: f64,
        }
        let rows: Vec<Row> = self
            .periods
            .iter()
            .flat_map(|s| {
                [("mse", s.mse), ("bias2", s.bias2), ("variance", s.variance)]
                    .into_iter()
                    .map(move |(component, value)| Row {
                        model: &s.model,
                        period: &s.period,
                        component,
                        value,
                    })
            })
            .collect();
        write_csv(path, &rows)
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "holdout comparison (logit scale, x 1e-4)");
        let _ = writeln!(out, "config digest: {}", self.meta.config_digest);
        let _ = writeln!(out, "split seed: {}", self.meta.split_seed);
        let _ = writeln!(
            out,
            "{:<12} {:<16} {:>10} {:>10} {:>10} {:>6}",
            "period", "model", "mse", "bias2", "variance", "areas"
        );
        for s in &self.periods {
            let _ = writeln!(
                out,
                "{:<12} {:<16} {:>10.2} {:>10.2} {:>10.2} {:>6}",
                s.period,
                s.model,
                s.mse * 1e4,
                s.bias2 * 1e4,
                s.variance * 1e4,
                s.n_areas
            );
        }
        if !self.criteria.is_empty() {
            let _ = writeln!(out, "\n{:<16} {:>12} {:>12} {:>12} {:>8}", "model", "dic", "waic", "lcpo", "flagged");
            for (m, c) in &self.criteria {
                let _ = writeln!(
                    out,
                    "{:<16} {:>12.2} {:>12.2} {:>12.2} {:>8}",
                    m, c.dic, c.waic, c.lcpo, c.cpo_flagged
                );
            }
        }
        let _ = writeln!(out, "\nexcluded cells: {}", self.missing.len());
        for m in &self.missing {
            let _ = writeln!(out, "  {m}");
        }
        out
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        write_atomic_str(path, &self.summary_text())
    }
}

/// DIC, WAIC and CPO of one fit; all are lower-is-better on the deviance
/// scale except `lpd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    pub dic: f64,
    pub p_dic: f64,
    pub waic: f64,
    pub p_waic: f64,
    /// Log pointwise predictive density.
    pub lpd: f64,
    /// `-sum log CPO_i`.
    pub lcpo: f64,
    /// Observations whose harmonic-mean weights are dominated by a few
    /// samples.
    pub cpo_flagged: usize,
    pub n_obs: usize,
    pub n_samples: usize,
}

fn log_mean_exp(v: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (v.map(|x| (x - m).exp()).sum::<f64>() / n as f64).ln()
}

/// Information criteria from the fit's posterior samples and the binomial
/// cells of `data`.
pub fn information_criteria(fit: &FitResult, data: &ModelData) -> Result<InformationCriteria> {
    let s = fit.samples.len();
    if s < MIN_SAMPLES {
        return Err(Error::Evaluate(format!(
            "information criteria need at least {MIN_SAMPLES} posterior samples, the fit has {s}"
        )));
    }
    if data.is_empty() {
        return Err(Error::Evaluate("no observations to score".into()));
    }
    let ll: Vec<Vec<f64>> = fit
        .samples
        .par_iter()
        .map(|x| pointwise_log_likelihood(data, &data.predictor(x)))
        .collect();
    let n_obs = data.n_rows();
    let mut mean_x = vec![0.0; data.n_latent];
    for x in &fit.samples {
        mean_x.iter_mut().zip(x).for_each(|(m, v)| *m += v / s as f64);
    }
    let d_at_mean = -2.0 * pointwise_log_likelihood(data, &data.predictor(&mean_x)).iter().sum::<f64>();
    let d_bar = -2.0 * ll.iter().map(|l| l.iter().sum::<f64>()).sum::<f64>() / s as f64;
    let p_dic = d_bar - d_at_mean;

    let (mut lpd, mut p_waic, mut lcpo, mut flagged) = (0.0, 0.0, 0.0, 0);
    let ess_floor = (0.05 * s as f64).max(10.0);
    for i in 0..n_obs {
        let col = ll.iter().map(|l| l[i]);
        lpd += log_mean_exp(col.clone(), s);
        let m = col.clone().sum::<f64>() / s as f64;
        p_waic += col.clone().map(|v| (v - m).powi(2)).sum::<f64>() / (s - 1) as f64;
        let neg = col.clone().map(|v| -v);
        lcpo += log_mean_exp(neg.clone(), s);
        // Effective sample size of the harmonic-mean weights exp(-ll).
        let top = neg.clone().fold(f64::NEG_INFINITY, f64::max);
        let (w1, w2) = neg.fold((0.0, 0.0), |(a, b), v| {
            let w = (v - top).exp();
            (a + w, b + w * w)
        });
        if w1 * w1 / w2 < ess_floor {
            flagged += 1;
        }
    }
    Ok(InformationCriteria {
        dic: d_at_mean + 2.0 * p_dic,
        p_dic,
        waic: -2.0 * (lpd - p_waic),
        p_waic,
        lpd,
        lcpo,
        cpo_flagged: flagged,
        n_obs,
        n_samples: s,
    })
}

/// Fixed inputs shared by every candidate model in a covariate search.
pub struct SearchInputs<'a> {
    pub domain: &'a StudyDomain,
    pub density: &'a AsciiGrid,
    pub table: &'a ExposureTable,
    pub offsets: &'a BiasOffsetTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub covariates: Vec<String>,
    pub log_marginal: f64,
    pub criteria: InformationCriteria,
    /// 1-based ranks by DIC, WAIC and LCPO.
    pub rank_dic: usize,
    pub rank_waic: usize,
    pub rank_lcpo: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Ordered by DIC rank.
    pub entries: Vec<SearchEntry>,
    /// All three criteria rank the same subset first.
    pub agreement: bool,
}

impl SearchResult {
    pub fn best_by(&self, criterion: &str) -> Option<&SearchEntry> {
        self.entries.iter().find(|e| match criterion {
            "dic" => e.rank_dic == 1,
            "waic" => e.rank_waic == 1,
            _ => e.rank_lcpo == 1,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            covariates: String,
            log_marginal: f64,
            dic: f64,
            waic: f64,
            lcpo: f64,
            cpo_flagged: usize,
            rank_dic: usize,
            rank_waic: usize,
            rank_lcpo: usize,
        }
        let rows: Vec<Row> = self
            .entries
            .iter()
            .map(|e| Row {
                covariates: e.covariates.join("+"),
                log_marginal: e.log_marginal,
                dic: e.criteria.dic,
                waic: e.criteria.waic,
                lcpo: e.criteria.lcpo,
                cpo_flagged: e.criteria.cpo_flagged,
                rank_dic: e.rank_dic,
                rank_waic: e.rank_waic,
                rank_lcpo: e.rank_lcpo,
            })
            .collect();
        write_csv(path, &rows)
    }
}

/// Fits every nonempty subset of `candidates` under a covariate variant and
/// ranks the subsets by each criterion. `workers` caps concurrent fits.
pub fn covariate_search(
    cfg: &SpecConfig,
    inputs: &SearchInputs<'_>,
    candidates: &[CovariateLayer],
    options: &FitOptions,
    workers: Option<usize>,
) -> Result<SearchResult> {
    if !cfg.variant.has_covariates() {
        return Err(Error::Evaluate(format!(
            "covariate search needs a covariate variant (M3 or M4), got {}",
            cfg.variant
        )));
    }
    let k = candidates.len();
    if k == 0 {
        return Err(Error::Evaluate("covariate search needs at least one candidate".into()));
    }
    if k > MAX_CANDIDATES {
        return Err(Error::Evaluate(format!(
            "{k} candidates need {} fits; reduce the candidates to at most {MAX_CANDIDATES}",
            (1u64 << k) - 1
        )));
    }
    let masks: Vec<usize> = (1..(1usize << k)).collect();
    let run = |mask: &usize| -> Result<(Vec<String>, f64, InformationCriteria)> {
        let chosen: Vec<CovariateLayer> = (0..k).filter(|i| mask >> i & 1 == 1).map(|i| candidates[i].clone()).collect();
        let (spec, data) = ModelSpec::build(
            cfg,
            SpecInputs {
                domain: inputs.domain.clone(),
                density: inputs.density,
                table: inputs.table,
                offsets: inputs.offsets.clone(),
                covariates: &chosen,
            },
        )?;
        let f = fit(&spec, &data, options)?;
        let ic = information_criteria(&f, &data)?;
        Ok((chosen.iter().map(|c| c.name.clone()).collect(), f.summary.log_marginal, ic))
    };
    let results: Vec<Result<_>> = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Evaluate(format!("cannot start worker pool: {e}")))?
            .install(|| masks.par_iter().map(run).collect()),
        None => masks.par_iter().map(run).collect(),
    };
    let fitted: Vec<(Vec<String>, f64, InformationCriteria)> = results.into_iter().collect::<Result<_>>()?;
    let rank = |key: &dyn Fn(&InformationCriteria) -> f64| -> Vec<usize> {
        let mut order: Vec<usize> = (0..fitted.len()).collect();
        order.sort_by(|&a, &b| key(&fitted[a].2).total_cmp(&key(&fitted[b].2)).then(a.cmp(&b)));
        let mut r = vec![0; fitted.len()];
        for (pos, &i) in order.iter().enumerate() {
            r[i] = pos + 1;
        }
        r
    };
    let (rd, rw, rc) = (rank(&|c| c.dic), rank(&|c| c.waic), rank(&|c| c.lcpo));
    let mut entries: Vec<SearchEntry> = fitted
        .into_iter()
        .enumerate()
        .map(|(i, (covariates, log_marginal, criteria))| SearchEntry {
            covariates,
            log_marginal,
            criteria,
            rank_dic: rd[i],
            rank_waic: rw[i],
            rank_lcpo: rc[i],
        })
        .collect();
    entries.sort_by_key(|e| e.rank_dic);
    let agreement = entries.first().is_some_and(|e| e.rank_waic == 1 && e.rank_lcpo == 1);
    Ok(SearchResult { entries, agreement })
}
