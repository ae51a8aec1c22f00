//! Stratified two-stage cluster surveys and design-based (direct) estimation.

mod direct;
mod split;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::{
    for_each_person_month, read_birth_csv, BirthRecord, ClusterId, StratumId, SurveyId, N_BANDS,
};
use crate::io::{read_csv, write_csv};

pub use direct::{
    direct_from_table, direct_u5mr, jackknife_from_table, jackknife_variance, AreaSelection,
    DirectEstimate, DirectOptions, EstimateFlag, Pooling, YearRange,
};
pub use split::holdout_split;

pub type AreaId = u32;
pub type ProvinceId = u32;

/// A sampled enumeration area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: ClusterId,
    pub survey_id: SurveyId,
    pub stratum_id: StratumId,
    pub lon: f64,
    pub lat: f64,
    pub weight: f64,
    pub province: ProvinceId,
    pub area: AreaId,
    /// Stored as 0/1 in CSV.
    #[serde(with = "bool_as_int")]
    pub urban: bool,
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("expected 0 or 1, got {other}"))),
        }
    }
}

/// A design stratum: province crossed with urban/rural.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum {
    pub id: StratumId,
    pub province: ProvinceId,
    pub urban: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    pub survey_id: SurveyId,
    pub strata: BTreeMap<StratumId, Stratum>,
    pub clusters: Vec<Cluster>,
    pub births: BTreeMap<ClusterId, Vec<BirthRecord>>,
}

impl SurveyDataset {
    pub fn new(survey_id: SurveyId, clusters: Vec<Cluster>, births: Vec<BirthRecord>) -> Result<Self> {
        let mut strata = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for c in &clusters {
            if c.survey_id != survey_id {
                return Err(Error::Survey(format!(
                    "cluster {} belongs to survey {}, not {survey_id}",
                    c.cluster_id, c.survey_id
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Survey(format!(
                    "cluster {} has non-positive weight {}",
                    c.cluster_id, c.weight
                )));
            }
            if !c.lon.is_finite() || !c.lat.is_finite() {
                return Err(Error::Survey(format!("cluster {} has no valid location", c.cluster_id)));
            }
            if seen.insert(c.cluster_id, ()).is_some() {
                return Err(Error::Survey(format!("duplicate cluster id {}", c.cluster_id)));
            }
            let s = Stratum {
                id: c.stratum_id,
                province: c.province,
                urban: c.urban,
            };
            match strata.get(&c.stratum_id) {
                Some(existing) if *existing != s => {
                    return Err(Error::Survey(format!(
                        "stratum {} mixes provinces or urban/rural labels",
                        c.stratum_id
                    )))
                }
                _ => {
                    strata.insert(c.stratum_id, s);
                }
            }
        }
        let mut by_cluster: BTreeMap<ClusterId, Vec<BirthRecord>> = BTreeMap::new();
        for b in births {
            if b.survey_id != survey_id {
                return Err(Error::Survey(format!(
                    "child {} belongs to survey {}, not {survey_id}",
                    b.child_id, b.survey_id
                )));
            }
            if !seen.contains_key(&b.cluster_id) {
                return Err(Error::Survey(format!(
                    "child {} refers to unknown cluster {}",
                    b.child_id, b.cluster_id
                )));
            }
            by_cluster.entry(b.cluster_id).or_default().push(b);
        }
        Ok(Self {
            survey_id,
            strata,
            clusters,
            births: by_cluster,
        })
    }

    pub fn n_births(&self) -> usize {
        self.births.values().map(Vec::len).sum()
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.cluster_id == id)
    }

    /// Keeps only the listed clusters (and their births).
    pub fn subset(&self, keep: &[ClusterId]) -> Result<Self> {
        let keep: std::collections::BTreeSet<_> = keep.iter().copied().collect();
        let clusters: Vec<Cluster> = self
            .clusters
            .iter()
            .filter(|c| keep.contains(&c.cluster_id))
            .cloned()
            .collect();
        let births = self
            .births
            .iter()
            .filter(|(k, _)| keep.contains(k))
            .flat_map(|(_, v)| v.iter().cloned())
            .collect();
        Self::new(self.survey_id, clusters, births)
    }

    pub fn all_births(&self) -> impl Iterator<Item = &BirthRecord> {
        self.births.values().flatten()
    }
}

/// Loads clusters and births and groups them into one dataset per survey.
pub fn load_surveys(cluster_csv: &Path, birth_csv: &Path) -> Result<Vec<SurveyDataset>> {
    let missing: Vec<_> = [cluster_csv, birth_csv]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.to_path_buf())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    let clusters: Vec<Cluster> = read_csv(cluster_csv)?;
    let births = read_birth_csv(birth_csv)?;
    group_surveys(clusters, births)
}

pub fn group_surveys(clusters: Vec<Cluster>, births: Vec<BirthRecord>) -> Result<Vec<SurveyDataset>> {
    let mut c_by: BTreeMap<SurveyId, Vec<Cluster>> = BTreeMap::new();
    for c in clusters {
        c_by.entry(c.survey_id).or_default().push(c);
    }
    let mut b_by: BTreeMap<SurveyId, Vec<BirthRecord>> = BTreeMap::new();
    for b in births {
        b_by.entry(b.survey_id).or_default().push(b);
    }
    if let Some(orphan) = b_by.keys().find(|k| !c_by.contains_key(k)) {
        return Err(Error::Survey(format!("births reference survey {orphan} with no clusters")));
    }
    c_by.into_iter()
        .map(|(id, cl)| SurveyDataset::new(id, cl, b_by.remove(&id).unwrap_or_default()))
        .collect()
}

pub fn write_cluster_csv(path: &Path, datasets: &[SurveyDataset]) -> Result<()> {
    write_csv(path, datasets.iter().flat_map(|d| d.clusters.iter()))
}

pub fn write_birth_csv(path: &Path, datasets: &[SurveyDataset]) -> Result<()> {
    let births: Vec<BirthRecord> = datasets.iter().flat_map(|d| d.all_births().cloned()).collect();
    crate::hazard::write_birth_csv(path, &births)
}

/// Deaths and person-months for one cluster, calendar year and age band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureCell {
    /// Index into [`ExposureTable::clusters`].
    pub cluster: usize,
    pub year: i32,
    pub band: usize,
    pub deaths: u32,
    pub exposure: u32,
}

/// Person-month tallies of a set of surveys: the sufficient statistics of
/// the Bernoulli likelihood when all months in a cell share a hazard.
#[derive(Debug, Clone)]
pub struct ExposureTable {
    pub clusters: Vec<Cluster>,
    pub cells: Vec<ExposureCell>,
}

impl ExposureTable {
    pub fn from_surveys(data: &[SurveyDataset]) -> Result<Self> {
        let mut clusters = Vec::new();
        let mut cells = Vec::new();
        for d in data {
            for c in &d.clusters {
                let idx = clusters.len();
                clusters.push(c.clone());
                let mut acc: BTreeMap<(i32, usize), (u32, u32)> = BTreeMap::new();
                for b in d.births.get(&c.cluster_id).into_iter().flatten() {
                    for_each_person_month(b, b.interview, |_, band, year, died| {
                        let e = acc.entry((year, band.position())).or_default();
                        e.1 += 1;
                        e.0 += died as u32;
                    })?;
                }
                cells.extend(acc.into_iter().map(|((year, band), (deaths, exposure))| ExposureCell {
                    cluster: idx,
                    year,
                    band,
                    deaths,
                    exposure,
                }));
            }
        }
        Ok(Self { clusters, cells })
    }

    pub fn n_person_months(&self) -> u64 {
        self.cells.iter().map(|c| c.exposure as u64).sum()
    }

    pub fn year_span(&self) -> Option<(i32, i32)> {
        let lo = self.cells.iter().map(|c| c.year).min()?;
        let hi = self.cells.iter().map(|c| c.year).max()?;
        Some((lo, hi))
    }

    /// Per-band deaths and exposure per cluster, restricted by `keep`.
    pub(crate) fn cluster_band_totals(
        &self,
        mut keep: impl FnMut(&Cluster, i32) -> bool,
    ) -> BTreeMap<usize, ([f64; N_BANDS], [f64; N_BANDS])> {
        let mut out: BTreeMap<usize, ([f64; N_BANDS], [f64; N_BANDS])> = BTreeMap::new();
        for cell in &self.cells {
            if keep(&self.clusters[cell.cluster], cell.year) {
                let e = out.entry(cell.cluster).or_insert(([0.0; N_BANDS], [0.0; N_BANDS]));
                e.0[cell.band] += cell.deaths as f64;
                e.1[cell.band] += cell.exposure as f64;
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::hazard::YearMonth;

    pub fn cluster(id: ClusterId, stratum: StratumId, weight: f64, area: AreaId) -> Cluster {
        Cluster {
            cluster_id: id,
            survey_id: 1,
            stratum_id: stratum,
            lon: 0.5,
            lat: 0.5,
            weight,
            province: 1,
            area,
            urban: stratum % 2 == 0,
        }
    }

    /// A child born in January `year` who dies at `death` or survives until
    /// the interview in January 2015.
    pub fn child(id: u64, cluster: ClusterId, year: i32, death: Option<u32>) -> BirthRecord {
        BirthRecord {
            child_id: id,
            cluster_id: cluster,
            survey_id: 1,
            birth: YearMonth::new(year, 1).unwrap(),
            died: death.is_some(),
            death_month: death,
            interview: YearMonth::new(2015, 1).unwrap(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn dataset_validation() {
        let ok = SurveyDataset::new(1, vec![cluster(1, 0, 1.0, 1)], vec![child(1, 1, 2005, None)]);
        assert!(ok.is_ok());
        assert!(SurveyDataset::new(1, vec![cluster(1, 0, 0.0, 1)], vec![]).is_err());
        assert!(SurveyDataset::new(1, vec![cluster(1, 0, 1.0, 1)], vec![child(1, 2, 2005, None)]).is_err());
        let mut mixed = cluster(2, 0, 1.0, 1);
        mixed.province = 9;
        assert!(SurveyDataset::new(1, vec![cluster(1, 0, 1.0, 1), mixed], vec![]).is_err());
    }

    #[test]
    fn exposure_table_counts_person_months() {
        let d = SurveyDataset::new(
            1,
            vec![cluster(1, 0, 1.0, 1)],
            vec![child(1, 1, 2005, None), child(2, 1, 2005, Some(13))],
        )
        .unwrap();
        let t = ExposureTable::from_surveys(&[d]).unwrap();
        assert_eq!(t.n_person_months(), 60 + 14);
        let deaths: u32 = t.cells.iter().map(|c| c.deaths).sum();
        assert_eq!(deaths, 1);
        let died_cell = t.cells.iter().find(|c| c.deaths == 1).unwrap();
        assert_eq!((died_cell.year, died_cell.band), (2006, 2));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = SurveyDataset::new(
            1,
            vec![cluster(1, 0, 1.5, 3), cluster(2, 1, 2.0, 4)],
            vec![child(1, 1, 2005, None), child(2, 2, 2010, Some(3))],
        )
        .unwrap();
        let (cp, bp) = (dir.path().join("c.csv"), dir.path().join("b.csv"));
        write_cluster_csv(&cp, &[d.clone()]).unwrap();
        write_birth_csv(&bp, &[d.clone()]).unwrap();
        let back = load_surveys(&cp, &bp).unwrap();
        assert_eq!(back, vec![d]);
    }
}
