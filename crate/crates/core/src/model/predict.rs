//! Posterior U5MR surfaces on the study grid.
//!
//! Predictions use the age intercepts, the rural effect, the temporal trend
//! and the spatial or space-time field only. Cluster, survey and year IID
//! effects describe the sampled data, and the bias offset corrects the
//! data, so neither enters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spec::{ModelSpec, TimeAxis, Variant, BAND_TREND};
use crate::error::{Error, Result};
use crate::hazard::{u5mr_from_logits, N_BANDS};

/// Which stratum effect applies to each prediction cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumPolicy {
    /// Urban baseline everywhere.
    Urban,
    /// Rural effect everywhere.
    Rural,
    /// Rural where the mask is `false`, one flag per grid cell.
    Mask(Vec<bool>),
}

impl StratumPolicy {
    fn rural(&self, cell: usize) -> bool {
        match self {
            StratumPolicy::Urban => false,
            StratumPolicy::Rural => true,
            StratumPolicy::Mask(urban) => !urban[cell],
        }
    }
}

/// Samples of a per-cell quantity for one year, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSamples {
    pub year: i32,
    pub n_samples: usize,
    pub n_cells: usize,
    pub values: Vec<f64>,
}

impl SurfaceSamples {
    pub fn sample(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_cells..(s + 1) * self.n_cells]
    }

    /// Posterior median of every cell (NaN cells stay NaN).
    pub fn cell_medians(&self) -> Vec<f64> {
        (0..self.n_cells)
            .map(|c| {
                let mut v: Vec<f64> = (0..self.n_samples).map(|s| self.values[s * self.n_cells + c]).collect();
                median(&mut v)
            })
            .collect()
    }
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() || v.iter().any(|x| x.is_nan()) {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Years `predict_u5mr_surface` accepts for `spec`.
pub fn prediction_years(spec: &ModelSpec) -> Vec<i32> {
    match &spec.time {
        TimeAxis::Years { first, last } => (*first..=*last).collect(),
        TimeAxis::Periods(p) => p.iter().flat_map(|r| r.years()).collect(),
    }
}

fn check_samples(spec: &ModelSpec, samples: &[Vec<f64>]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Model("no posterior samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != spec.n_latent()) {
        return Err(Error::Model(format!(
            "latent sample has length {} but the model has {}",
            s.len(),
            spec.n_latent()
        )));
    }
    Ok(())
}

fn time_index(spec: &ModelSpec, year: i32) -> Result<usize> {
    spec.time.index_of(year).ok_or_else(|| {
        let years = prediction_years(spec);
        Error::Model(format!(
            "prediction year {year} outside the model years {}..={}",
            years.first().copied().unwrap_or(0),
            years.last().copied().unwrap_or(0)
        ))
    })
}

/// The spatial or space-time field `u(s, t)` at every grid cell.
fn field_at(spec: &ModelSpec, x: &[f64], year: i32, out: &mut [f64]) -> Result<()> {
    let l = &spec.layout;
    let d = &spec.domain;
    out.iter_mut().for_each(|v| *v = 0.0);
    if !l.u.is_empty() {
        let knots = spec.knots.as_ref().expect("space-time model has knots");
        let n_s = spec.n_nodes();
        for (k, w) in knots.weights(year)? {
            let base = l.u.start + k * n_s;
            for (cell, o) in out.iter_mut().enumerate() {
                *o += w * x[base + d.cell_node(cell)];
            }
        }
    }
    if !l.spatial.is_empty() {
        for (cell, o) in out.iter_mut().enumerate() {
            *o += x[l.spatial.start + d.cell_node(cell)];
        }
    }
    Ok(())
}

/// U5MR samples on every grid cell for calendar `year`; period models use
/// the period containing `year`.
pub fn predict_u5mr_surface(
    spec: &ModelSpec,
    samples: &[Vec<f64>],
    year: i32,
    policy: &StratumPolicy,
) -> Result<SurfaceSamples> {
    check_samples(spec, samples)?;
    let t = time_index(spec, year)?;
    let n_cells = spec.domain.grid.n_cells();
    if let StratumPolicy::Mask(m) = policy {
        if m.len() != n_cells {
            return Err(Error::Model(format!(
                "urban mask has {} cells but the grid has {n_cells}",
                m.len()
            )));
        }
    }
    let l = &spec.layout;
    let n_t = spec.n_time();
    let per_sample: Vec<Result<Vec<f64>>> = samples
        .par_iter()
        .map(|x| {
            let mut field = vec![0.0; n_cells];
            field_at(spec, x, year, &mut field)?;
            let mut base = [0.0; N_BANDS];
            for (a, b) in base.iter_mut().enumerate() {
                *b = x[l.beta.start + a];
                match spec.variant {
                    Variant::SpaceTime => *b += x[l.phi.start + BAND_TREND[a] * n_t + t],
                    _ => *b += x[l.gamma.start + t],
                }
            }
            let delta = x[l.delta.start];
            let mut out = Vec::with_capacity(n_cells);
            for (cell, &u) in field.iter().enumerate() {
                let mut shift = u + if policy.rural(cell) { delta } else { 0.0 };
                if let Some(cov) = &spec.covariates {
                    for (k, &z) in cov.cell_values[t][cell].iter().enumerate() {
                        shift += x[l.coef.start + k] * z;
                    }
                }
                let beta = base.map(|b| b + shift);
                out.push(u5mr_from_logits(&beta));
            }
            Ok(out)
        })
        .collect();
    let mut values = Vec::with_capacity(samples.len() * n_cells);
    for s in per_sample {
        values.extend(s?);
    }
    Ok(SurfaceSamples {
        year,
        n_samples: samples.len(),
        n_cells,
        values,
    })
}

/// Samples of `exp u(s, t)`, the multiplicative spatial or space-time
/// effect on the odds, at every grid cell.
pub fn field_odds_surface(spec: &ModelSpec, samples: &[Vec<f64>], year: i32) -> Result<SurfaceSamples> {
    check_samples(spec, samples)?;
    time_index(spec, year)?;
    if spec.layout.u.is_empty() && spec.layout.spatial.is_empty() {
        return Err(Error::Model(format!("variant {} has no spatial field", spec.variant)));
    }
    let n_cells = spec.domain.grid.n_cells();
    let mut values = Vec::with_capacity(samples.len() * n_cells);
    let mut field = vec![0.0; n_cells];
    for x in samples {
        field_at(spec, x, year, &mut field)?;
        values.extend(field.iter().map(|u| u.exp()));
    }
    Ok(SurfaceSamples {
        year,
        n_samples: samples.len(),
        n_cells,
        values,
    })
}
