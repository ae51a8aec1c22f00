//! HIV bias ratios entering the linear predictor as a log offset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::SurveyId;
use crate::io::{read_csv, write_csv};
use crate::survey::ProvinceId;

/// One row of the bias-offset CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub province: ProvinceId,
    pub survey_id: SurveyId,
    pub year: i32,
    pub ratio: f64,
}

/// Ratios `BIAS = true U5MR / reported U5MR >= 1` by province, survey and
/// year. Cells not in the table have ratio 1.
///
/// Reported data understate mortality by the factor `1 / BIAS`, so the
/// offset added to the logit hazard of the observations is `-log BIAS`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<BiasRow>", try_from = "Vec<BiasRow>")]
pub struct BiasOffsetTable {
    ratios: BTreeMap<(ProvinceId, SurveyId, i32), f64>,
}

impl BiasOffsetTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: impl IntoIterator<Item = BiasRow>) -> Result<Self> {
        let mut t = Self::new();
        for r in rows {
            t.insert(r.province, r.survey_id, r.year, r.ratio)?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, province: ProvinceId, survey: SurveyId, year: i32, ratio: f64) -> Result<()> {
        if !(ratio >= 1.0) || !ratio.is_finite() {
            return Err(Error::Validation(format!(
                "bias ratio for province {province}, survey {survey}, year {year} must be >= 1, got {ratio}"
            )));
        }
        if self.ratios.insert((province, survey, year), ratio).is_some() {
            return Err(Error::Validation(format!(
                "duplicate bias ratio for province {province}, survey {survey}, year {year}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    /// The ratio, or `None` when the cell is absent.
    pub fn get(&self, province: ProvinceId, survey: SurveyId, year: i32) -> Option<f64> {
        self.ratios.get(&(province, survey, year)).copied()
    }

    pub fn ratio(&self, province: ProvinceId, survey: SurveyId, year: i32) -> f64 {
        self.get(province, survey, year).unwrap_or(1.0)
    }

    /// Offset on the logit-hazard scale of the observed data.
    pub fn log_offset(&self, province: ProvinceId, survey: SurveyId, year: i32) -> f64 {
        -self.ratio(province, survey, year).ln()
    }

    /// Every ratio multiplied by `c >= 1`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let mut out = Self::new();
        for (&(p, s, y), &r) in &self.ratios {
            out.insert(p, s, y, r * c)?;
        }
        Ok(out)
    }

    pub fn rows(&self) -> Vec<BiasRow> {
        self.ratios
            .iter()
            .map(|(&(province, survey_id, year), &ratio)| BiasRow {
                province,
                survey_id,
                year,
                ratio,
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_rows(read_csv::<BiasRow>(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows())
    }
}

impl From<BiasOffsetTable> for Vec<BiasRow> {
    fn from(t: BiasOffsetTable) -> Self {
        t.rows()
    }
}

impl TryFrom<Vec<BiasRow>> for BiasOffsetTable {
    type Error = Error;

    fn try_from(rows: Vec<BiasRow>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_defaults_and_sign() {
        let mut t = BiasOffsetTable::new();
        t.insert(1, 2, 2000, 1.1).unwrap();
        assert_eq!(t.ratio(1, 2, 2000), 1.1);
        assert_eq!(t.ratio(9, 2, 2000), 1.0);
        assert!((t.log_offset(1, 2, 2000) + 1.1f64.ln()).abs() < 1e-15);
        assert_eq!(t.log_offset(9, 9, 1), 0.0);
    }

    #[test]
    fn rejects_ratios_below_one_and_duplicates() {
        let mut t = BiasOffsetTable::new();
        assert!(t.insert(1, 1, 2000, 0.99).is_err());
        assert!(t.insert(1, 1, 2000, f64::NAN).is_err());
        t.insert(1, 1, 2000, 1.0).unwrap();
        assert!(t.insert(1, 1, 2000, 1.2).is_err());
    }

    #[test]
    fn scaling_shifts_offsets_by_log_c() {
        let t = BiasOffsetTable::from_rows([
            BiasRow { province: 1, survey_id: 1, year: 1990, ratio: 1.05 },
            BiasRow { province: 2, survey_id: 1, year: 1991, ratio: 1.3 },
        ])
        .unwrap();
        let s = t.scaled(2.0).unwrap();
        for r in t.rows() {
            let d = s.log_offset(r.province, r.survey_id, r.year) - t.log_offset(r.province, r.survey_id, r.year);
            assert!((d + 2f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bias.csv");
        let t = BiasOffsetTable::from_rows([BiasRow { province: 3, survey_id: 7, year: 2001, ratio: 1.25 }]).unwrap();
        t.write(&p).unwrap();
        assert_eq!(BiasOffsetTable::read(&p).unwrap(), t);
    }
}
