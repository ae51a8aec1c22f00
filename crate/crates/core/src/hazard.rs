//! Discrete-time hazards for child mortality.
//!
//! A birth history is expanded into person-months, each a Bernoulli trial.
//! Months are grouped into six age bands that share a hazard, and a vector of
//! band hazards is converted into the under-5 mortality rate (U5MR) by
//! compounding the monthly survival probabilities.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub type ChildId = u64;
pub type ClusterId = u32;
pub type SurveyId = u32;
pub type StratumId = u32;

pub const N_BANDS: usize = 6;
pub const MONTHS_UNDER_FIVE: u32 = 60;

/// Number of months covered by each age band.
pub const BAND_SPANS: [u32; N_BANDS] = [1, 11, 12, 12, 12, 12];

/// First month of each band.
const BAND_STARTS: [u32; N_BANDS] = [0, 1, 12, 24, 36, 48];

/// One of the six age bands `[0,1), [1,12), [12,24), [24,36), [36,48), [48,60)`
/// (in months). Stored 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgeBand(u8);

impl AgeBand {
    pub fn new(index: u8) -> Result<Self> {
        if (1..=N_BANDS as u8).contains(&index) {
            Ok(Self(index))
        } else {
            Err(Error::Domain(format!("age band index {index} outside 1..=6")))
        }
    }

    pub fn all() -> impl Iterator<Item = AgeBand> {
        (1..=N_BANDS as u8).map(AgeBand)
    }

    /// 1-based band index.
    pub fn index(self) -> u8 {
        self.0
    }

    /// 0-based position, for array indexing.
    pub fn position(self) -> usize {
        self.0 as usize - 1
    }

    /// Month span `z[a]`.
    pub fn month_span(self) -> u32 {
        BAND_SPANS[self.position()]
    }

    pub fn months(self) -> std::ops::Range<u32> {
        let start = BAND_STARTS[self.position()];
        start..start + self.month_span()
    }
}

/// Maps month of age `m` (0..=59) to its age band.
pub fn age_band_of_month(m: u32) -> Result<AgeBand> {
    let index = match m {
        0 => 1,
        1..=11 => 2,
        12..=23 => 3,
        24..=35 => 4,
        36..=47 => 5,
        48..=59 => 6,
        _ => return Err(Error::Domain(format!("month {m} outside 0..=59"))),
    };
    Ok(AgeBand(index))
}

/// Calendar year and month (1..=12).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Validation(format!("calendar month {month} outside 1..=12")));
        }
        Ok(Self { year, month })
    }

    /// Months elapsed from `self` to `later` (negative if `later` is earlier).
    pub fn months_until(self, later: YearMonth) -> i64 {
        (later.year as i64 - self.year as i64) * 12 + (later.month as i64 - self.month as i64)
    }
}

/// One child from a retrospective birth history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirthRecord {
    pub child_id: ChildId,
    pub cluster_id: ClusterId,
    pub survey_id: SurveyId,
    pub birth: YearMonth,
    pub died: bool,
    /// Age in completed months at death.
    pub death_month: Option<u32>,
    pub interview: YearMonth,
}

impl BirthRecord {
    pub fn birth_year(&self) -> i32 {
        self.birth.year
    }

    /// Months of exposure before right censoring at `censoring`, capped at 60.
    pub fn months_observed(&self, censoring: YearMonth) -> u32 {
        self.birth
            .months_until(censoring)
            .clamp(0, MONTHS_UNDER_FIVE as i64) as u32
    }

    pub fn validate(&self, censoring: YearMonth) -> Result<()> {
        match (self.died, self.death_month) {
            (true, None) => Err(Error::Validation(format!(
                "child {} died but has no death month",
                self.child_id
            ))),
            (false, Some(_)) => Err(Error::Validation(format!(
                "child {} survived but has a death month",
                self.child_id
            ))),
            (true, Some(d)) => {
                let horizon = self.months_observed(censoring);
                if d >= horizon {
                    Err(Error::Validation(format!(
                        "child {}: death month {d} is not before the censoring horizon {horizon}",
                        self.child_id
                    )))
                } else {
                    Ok(())
                }
            }
            (false, None) => Ok(()),
        }
    }
}

/// One child-month at risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonMonth {
    pub child_id: ChildId,
    pub month: u32,
    pub band: AgeBand,
    pub year: i32,
    pub cluster_id: ClusterId,
    pub survey_id: SurveyId,
    pub stratum_id: StratumId,
    pub died: bool,
}

/// Expands a birth record into person-months.
///
/// Month `m` is attributed to calendar year `birth_year + m / 12`. Months at or
/// after the censoring date are dropped, and the expansion stops at the death
/// month, which carries the single `died = true` record.
pub fn expand_birth_history(
    rec: &BirthRecord,
    stratum_id: StratumId,
    censoring: YearMonth,
) -> Result<Vec<PersonMonth>> {
    let mut out = Vec::new();
    for_each_person_month(rec, censoring, |month, band, year, died| {
        out.push(PersonMonth {
            child_id: rec.child_id,
            month,
            band,
            year,
            cluster_id: rec.cluster_id,
            survey_id: rec.survey_id,
            stratum_id,
            died,
        })
    })?;
    Ok(out)
}

/// Allocation-free form of [`expand_birth_history`]; calls
/// `f(month, band, year, died)` for every person-month.
pub fn for_each_person_month(
    rec: &BirthRecord,
    censoring: YearMonth,
    mut f: impl FnMut(u32, AgeBand, i32, bool),
) -> Result<()> {
    rec.validate(censoring)?;
    let last = match rec.death_month {
        Some(d) => d + 1,
        None => rec.months_observed(censoring),
    };
    for m in 0..last {
        let band = age_band_of_month(m)?;
        let year = rec.birth.year + (m / 12) as i32;
        f(m, band, year, rec.death_month == Some(m));
    }
    Ok(())
}

/// Monthly death probabilities, one per age band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardVector([f64; N_BANDS]);

impl HazardVector {
    pub fn new(q: [f64; N_BANDS]) -> Result<Self> {
        if let Some(bad) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("hazard {bad} outside [0, 1]")));
        }
        Ok(Self(q))
    }

    pub fn constant(q: f64) -> Result<Self> {
        Self::new([q; N_BANDS])
    }

    pub fn from_logits(beta: &[f64; N_BANDS]) -> Self {
        Self(beta.map(expit))
    }

    pub fn values(&self) -> &[f64; N_BANDS] {
        &self.0
    }

    pub fn get(&self, band: AgeBand) -> f64 {
        self.0[band.position()]
    }
}

/// `1 - prod_a (1 - q_a)^{z[a]}`
pub fn u5mr_from_hazards(h: &HazardVector) -> f64 {
    let log_survival: f64 = h
        .0
        .iter()
        .zip(BAND_SPANS)
        .map(|(&q, z)| z as f64 * (-q).ln_1p())
        .sum();
    -log_survival.exp_m1()
}

/// U5MR from logit hazards, `1 - prod_a [1 / (1 + exp beta_a)]^{z[a]}`,
/// evaluated without forming the hazards.
pub fn u5mr_from_logits(beta: &[f64; N_BANDS]) -> f64 {
    let log_survival: f64 = beta
        .iter()
        .zip(BAND_SPANS)
        .map(|(&b, z)| -(z as f64) * softplus(b))
        .sum();
    -log_survival.exp_m1()
}

/// `log(1 + exp x)`
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok((p / (1.0 - p)).ln())
    } else {
        Err(Error::Domain(format!("logit undefined at {p}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BirthRow {
    child_id: ChildId,
    cluster_id: ClusterId,
    survey_id: SurveyId,
    birth_year: i32,
    birth_month: u8,
    died: u8,
    death_month: Option<u32>,
    interview_year: i32,
    interview_month: u8,
}

pub fn read_birth_csv(path: &Path) -> Result<Vec<BirthRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<BirthRow>().enumerate() {
        let row = row?;
        let died = match row.died {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Validation(format!(
                    "{}: row {}: died must be 0 or 1, got {other}",
                    path.display(),
                    line + 2
                )))
            }
        };
        let rec = BirthRecord {
            child_id: row.child_id,
            cluster_id: row.cluster_id,
            survey_id: row.survey_id,
            birth: YearMonth::new(row.birth_year, row.birth_month)?,
            died,
            death_month: row.death_month,
            interview: YearMonth::new(row.interview_year, row.interview_month)?,
        };
        rec.validate(rec.interview)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_birth_csv(path: &Path, records: &[BirthRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in records {
        writer.serialize(BirthRow {
            child_id: r.child_id,
            cluster_id: r.cluster_id,
            survey_id: r.survey_id,
            birth_year: r.birth.year,
            birth_month: r.birth.month,
            died: r.died as u8,
            death_month: r.death_month,
            interview_year: r.interview.year,
            interview_month: r.interview.month,
        })?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(died_at: Option<u32>, interview: YearMonth) -> BirthRecord {
        BirthRecord {
            child_id: 7,
            cluster_id: 1,
            survey_id: 2014,
            birth: YearMonth::new(2005, 3).unwrap(),
            died: died_at.is_some(),
            death_month: died_at,
            interview,
        }
    }

    #[test]
    fn band_table_endpoints() {
        assert_eq!(age_band_of_month(0).unwrap().index(), 1);
        assert_eq!(age_band_of_month(11).unwrap().index(), 2);
        assert_eq!(age_band_of_month(59).unwrap().index(), 6);
        assert!(age_band_of_month(60).is_err());
    }

    #[test]
    fn band_preimages_have_the_stated_sizes() {
        let mut counts = [0u32; N_BANDS];
        for m in 0..60 {
            counts[age_band_of_month(m).unwrap().position()] += 1;
        }
        assert_eq!(counts, BAND_SPANS);
        assert_eq!(BAND_SPANS.iter().sum::<u32>(), 60);
        for band in AgeBand::all() {
            for m in band.months() {
                assert_eq!(age_band_of_month(m).unwrap(), band);
            }
        }
    }

    #[test]
    fn full_survivor_contributes_sixty_months() {
        let rec = record(None, YearMonth::new(2014, 1).unwrap());
        let pm = expand_birth_history(&rec, 3, rec.interview).unwrap();
        assert_eq!(pm.len(), 60);
        assert!(pm.iter().all(|p| !p.died && p.stratum_id == 3));
        assert_eq!(pm[0].year, 2005);
        assert_eq!(pm[59].year, 2009);
    }

    #[test]
    fn immediate_death_is_a_single_record() {
        let rec = record(Some(0), YearMonth::new(2014, 1).unwrap());
        let pm = expand_birth_history(&rec, 0, rec.interview).unwrap();
        assert_eq!(pm.len(), 1);
        assert!(pm[0].died);
    }

    #[test]
    fn death_before_censoring_truncates_at_death() {
        // interview 30 months after birth
        let interview = YearMonth::new(2007, 9).unwrap();
        let rec = record(Some(12), interview);
        assert_eq!(rec.months_observed(interview), 30);
        let pm = expand_birth_history(&rec, 0, interview).unwrap();
        assert_eq!(pm.len(), 13);
        assert!(pm[12].died);
        assert!(pm[..12].iter().all(|p| !p.died));
        assert_eq!(pm[12].band.index(), 3);
        assert_eq!(pm[12].year, 2006);
    }

    #[test]
    fn censored_survivor_stops_before_interview_month() {
        let interview = YearMonth::new(2007, 9).unwrap();
        let rec = record(None, interview);
        assert_eq!(expand_birth_history(&rec, 0, interview).unwrap().len(), 30);
    }

    #[test]
    fn death_at_or_after_horizon_is_rejected() {
        let interview = YearMonth::new(2007, 9).unwrap();
        assert!(expand_birth_history(&record(Some(30), interview), 0, interview).is_err());
        let mut bad = record(Some(3), interview);
        bad.died = false;
        assert!(bad.validate(interview).is_err());
    }

    #[test]
    fn u5mr_reference_values() {
        assert_eq!(u5mr_from_hazards(&HazardVector::constant(0.0).unwrap()), 0.0);
        let neonatal = HazardVector::new([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(u5mr_from_hazards(&neonatal), 1.0);
        let u = u5mr_from_hazards(&HazardVector::constant(0.001).unwrap());
        assert!((u - (1.0 - 0.999f64.powi(60))).abs() < 1e-15);
        assert!((u - 0.0582).abs() < 1e-4);
    }

    #[test]
    fn u5mr_matches_monte_carlo_children() {
        use rand::{Rng, SeedableRng};
        let h = HazardVector::constant(0.001).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut deaths = 0u32;
        for _ in 0..n {
            for m in 0..60 {
                let q = h.get(age_band_of_month(m).unwrap());
                if rng.random::<f64>() < q {
                    deaths += 1;
                    break;
                }
            }
        }
        let p = u5mr_from_hazards(&h);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((deaths as f64 / n as f64 - p).abs() < 4.0 * se);
    }

    #[test]
    fn logit_expit_reference_values() {
        assert_eq!(expit(0.0), 0.5);
        assert_eq!(logit(0.5).unwrap(), 0.0);
        assert!((expit(logit(0.0582).unwrap()) - 0.0582).abs() < 1e-15);
        assert!(logit(0.0).is_err());
        assert!(logit(1.0).is_err());
        assert!((expit(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn logits_and_hazards_agree() {
        let beta = [-3.0, -5.0, -6.5, -7.0, -7.5, -8.0];
        let a = u5mr_from_logits(&beta);
        let b = u5mr_from_hazards(&HazardVector::from_logits(&beta));
        assert!((a - b).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn u5mr_is_monotone_in_each_band(
            q in proptest::array::uniform6(0.0f64..0.2),
            band in 0usize..6,
            bump in 0.0f64..0.1,
        ) {
            let base = u5mr_from_hazards(&HazardVector::new(q).unwrap());
            let mut q2 = q;
            q2[band] += bump;
            let raised = u5mr_from_hazards(&HazardVector::new(q2).unwrap());
            prop_assert!(raised >= base);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn expansion_conserves_deaths(
            birth_offset in 0i64..80,
            death in proptest::option::of(0u32..60),
        ) {
            let interview = YearMonth::new(2010, 6).unwrap();
            let total = 2010 * 12 + 5 - birth_offset;
            let birth = YearMonth::new((total / 12) as i32, (total % 12 + 1) as u8).unwrap();
            let rec = BirthRecord {
                child_id: 1, cluster_id: 1, survey_id: 1, birth,
                died: death.is_some(), death_month: death, interview,
            };
            match expand_birth_history(&rec, 0, interview) {
                Ok(pm) => {
                    let deaths = pm.iter().filter(|p| p.died).count();
                    prop_assert_eq!(deaths, rec.died as usize);
                    prop_assert!(pm.len() as u32 <= rec.months_observed(interview));
                }
                Err(_) => prop_assert!(death.unwrap() >= rec.months_observed(interview)),
            }
        }
    }
}
