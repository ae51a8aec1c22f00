//! Piecewise-linear temporal interpolation of a field defined at knot years.

use serde::{Deserialize, Serialize};

use super::sparse::CscMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnotSchedule {
    years: Vec<i32>,
}

impl KnotSchedule {
    pub fn new(years: Vec<i32>) -> Result<Self> {
        if years.len() < 2 {
            return Err(Error::Gmrf("need at least two knots".into()));
        }
        if years.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Gmrf(format!("knot years must increase strictly: {years:?}")));
        }
        Ok(Self { years })
    }

    /// Knots every `step` years from `first` through `last` inclusive.
    pub fn regular(first: i32, last: i32, step: i32) -> Result<Self> {
        if step <= 0 || last < first {
            return Err(Error::Gmrf(format!("bad knot range {first}..{last} step {step}")));
        }
        Self::new((first..=last).step_by(step as usize).collect())
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn len(&self) -> usize {
        self.years.len()
    }

    pub fn is_empty(&self) -> bool {
        self.years.is_empty()
    }

    pub fn first(&self) -> i32 {
        self.years[0]
    }

    pub fn last(&self) -> i32 {
        *self.years.last().unwrap()
    }

    /// Appends a knot after the current last one.
    pub fn extended(&self, year: i32) -> Result<Self> {
        let mut years = self.years.clone();
        years.push(year);
        Self::new(years)
    }

    /// `[(h, 1 - alpha), (h + 1, alpha)]` for `year` between knots `h` and
    /// `h + 1`; a single entry at a knot year.
    pub fn weights(&self, year: i32) -> Result<Vec<(usize, f64)>> {
        if year < self.first() || year > self.last() {
            return Err(Error::Domain(format!(
                "year {year} outside knot hull {}..={}",
                self.first(),
                self.last()
            )));
        }
        let h = match self.years.binary_search(&year) {
            Ok(k) => return Ok(vec![(k, 1.0)]),
            Err(k) => k - 1,
        };
        let alpha = (year - self.years[h]) as f64 / (self.years[h + 1] - self.years[h]) as f64;
        Ok(vec![(h, 1.0 - alpha), (h + 1, alpha)])
    }
}

/// Projection `(years x cells) x (knots x cells)` mapping knot fields to
/// yearly fields, both laid out time-major and cell-minor.
pub fn knot_interpolation_matrix(years: &[i32], knots: &KnotSchedule, n_cells: usize) -> Result<CscMatrix> {
    let mut trip = Vec::with_capacity(2 * years.len() * n_cells);
    for (row, &year) in years.iter().enumerate() {
        for (k, w) in knots.weights(year)? {
            for s in 0..n_cells {
                trip.push((row * n_cells + s, k * n_cells + s, w));
            }
        }
    }
    Ok(CscMatrix::from_triplets(years.len() * n_cells, knots.len() * n_cells, &trip))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_knots() -> KnotSchedule {
        KnotSchedule::regular(1980, 2015, 5).unwrap()
    }

    #[test]
    fn eight_knots() {
        assert_eq!(paper_knots().len(), 8);
    }

    #[test]
    fn knot_years_and_midpoints() {
        let k = paper_knots();
        assert_eq!(k.weights(1980).unwrap(), vec![(0, 1.0)]);
        let w = k.weights(1982).unwrap();
        assert_eq!(w[0].0, 0);
        assert!((w[0].1 - 0.6).abs() < 1e-15 && (w[1].1 - 0.4).abs() < 1e-15);
        assert!(k.weights(1979).is_err());
        assert!(k.weights(2016).is_err());
        for year in 1980..=2015 {
            let alpha = year as f64 / 5.0 - (year as f64 / 5.0).floor();
            let w = k.weights(year).unwrap();
            let got = if w.len() == 1 { 0.0 } else { w[1].1 };
            assert!((got - alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_rows_sum_to_one() {
        let years: Vec<i32> = (1980..=2014).collect();
        let a = knot_interpolation_matrix(&years, &paper_knots(), 3).unwrap();
        assert_eq!(a.nrows(), 35 * 3);
        assert_eq!(a.ncols(), 8 * 3);
        let sums = a.mul_vec(&vec![1.0; a.ncols()]);
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-14));
        let at = a.transpose();
        for r in 0..a.nrows() {
            assert!(at.col(r).count() <= 2);
        }
    }
}
