//! ASCII grid rasters and the mapping between a study raster and the padded
//! SPDE mesh built on top of it.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mesh::SpatialMesh;
use crate::error::{Error, Result};
use crate::io::write_atomic_str;

/// Geometry of a north-up raster: row 0 is the northern edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
}

impl GridGeometry {
    pub fn n_cells(&self) -> usize {
        self.ncols * self.nrows
    }

    /// Row-major cell index, row 0 northernmost.
    pub fn cell(&self, col: usize, row: usize) -> usize {
        row * self.ncols + col
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (col, row) = (cell % self.ncols, cell / self.ncols);
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.yll + ((self.nrows - 1 - row) as f64 + 0.5) * self.cellsize,
        )
    }

    pub fn cell_centers(&self) -> Vec<(f64, f64)> {
        (0..self.n_cells()).map(|c| self.cell_center(c)).collect()
    }

    /// Cell containing `(lon, lat)`, if any.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<usize> {
        let fx = (lon - self.xll) / self.cellsize;
        let fy = (lat - self.yll) / self.cellsize;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (col, up) = (fx.floor() as usize, fy.floor() as usize);
        if col >= self.ncols || up >= self.nrows {
            return None;
        }
        Some(self.cell(col, self.nrows - 1 - up))
    }

    pub fn same_as(&self, other: &GridGeometry) -> bool {
        let tol = 1e-9 * self.cellsize;
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && (self.xll - other.xll).abs() < tol
            && (self.yll - other.yll).abs() < tol
            && (self.cellsize - other.cellsize).abs() < tol
    }
}

/// Raster values with `NaN` standing in for nodata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsciiGrid {
    pub geometry: GridGeometry,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl AsciiGrid {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.n_cells() {
            return Err(Error::Validation(format!(
                "raster has {} values for {} cells",
                values.len(),
                geometry.n_cells()
            )));
        }
        Ok(Self {
            geometry,
            nodata: -9999.0,
            values,
        })
    }

    pub fn get(&self, cell: usize) -> Option<f64> {
        let v = self.values[cell];
        (!v.is_nan()).then_some(v)
    }

    pub fn value_at(&self, lon: f64, lat: f64) -> Option<f64> {
        self.geometry.locate(lon, lat).and_then(|c| self.get(c))
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = std::collections::HashMap::new();
        let mut first_data: Option<(usize, &str)> = None;
        for (i, line) in lines.by_ref() {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            if key.parse::<f64>().is_ok() || key.starts_with('-') {
                first_data = Some((i, line));
                break;
            }
            let value: f64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| grid_error(source, i + 1, format!("bad header line `{line}`")))?;
            header.insert(key, (value, i + 1));
        }
        let need = |k: &str| {
            header
                .get(k)
                .map(|v| v.0)
                .ok_or_else(|| grid_error(source, 0, format!("missing header `{k}`")))
        };
        let ncols = need("ncols")? as usize;
        let nrows = need("nrows")? as usize;
        let cellsize = need("cellsize")?;
        let (xll, yll) = match (header.get("xllcorner"), header.get("xllcenter")) {
            (Some(x), _) => (x.0, need("yllcorner")?),
            (None, Some(x)) => (x.0 - cellsize / 2.0, need("yllcenter")? - cellsize / 2.0),
            _ => return Err(grid_error(source, 0, "missing header `xllcorner`")),
        };
        let nodata = header.get("nodata_value").or(header.get("nodata")).map(|v| v.0);
        if ncols == 0 || nrows == 0 || !(cellsize > 0.0) {
            return Err(grid_error(source, 0, "degenerate raster geometry"));
        }
        let mut values = Vec::with_capacity(ncols * nrows);
        for (i, line) in first_data.into_iter().chain(lines) {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| grid_error(source, i + 1, format!("bad value `{tok}`")))?;
                values.push(if Some(v) == nodata { f64::NAN } else { v });
            }
        }
        if values.len() != ncols * nrows {
            return Err(grid_error(
                source,
                0,
                format!("expected {} values, found {}", ncols * nrows, values.len()),
            ));
        }
        Ok(Self {
            geometry: GridGeometry {
                ncols,
                nrows,
                xll,
                yll,
                cellsize,
            },
            nodata: nodata.unwrap_or(-9999.0),
            values,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInputs(vec![path.to_path_buf()]));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut out = String::new();
        let _ = writeln!(out, "ncols {}", g.ncols);
        let _ = writeln!(out, "nrows {}", g.nrows);
        let _ = writeln!(out, "xllcorner {}", g.xll);
        let _ = writeln!(out, "yllcorner {}", g.yll);
        let _ = writeln!(out, "cellsize {}", g.cellsize);
        let _ = writeln!(out, "NODATA_value {}", self.nodata);
        for row in 0..g.nrows {
            let line: Vec<String> = (0..g.ncols)
                .map(|col| {
                    let v = self.values[g.cell(col, row)];
                    if v.is_nan() {
                        format!("{}", self.nodata)
                    } else {
                        format!("{v}")
                    }
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic_str(path, &self.to_text())
    }
}

fn grid_error(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        path: source.to_string(),
        line,
        message: message.into(),
    }
}

/// A study raster embedded in an SPDE mesh with `pad` extra nodes on each
/// side to soften the Neumann boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDomain {
    pub grid: GridGeometry,
    pub mesh: SpatialMesh,
    pub pad: usize,
}

impl StudyDomain {
    pub fn new(grid: GridGeometry, pad: usize) -> Result<Self> {
        let h = grid.cellsize;
        let mesh = SpatialMesh::new(
            grid.ncols + 2 * pad,
            grid.nrows + 2 * pad,
            grid.xll + 0.5 * h - pad as f64 * h,
            grid.yll + 0.5 * h - pad as f64 * h,
            h,
        )?;
        Ok(Self { grid, mesh, pad })
    }

    /// Padding that extends the mesh by at least `distance` beyond the grid.
    pub fn with_margin(grid: GridGeometry, distance: f64) -> Result<Self> {
        let pad = (distance / grid.cellsize).ceil().max(0.0) as usize;
        Self::new(grid, pad)
    }

    /// Mesh node at the center of raster cell `cell`.
    pub fn cell_node(&self, cell: usize) -> usize {
        let (col, row) = (cell % self.grid.ncols, cell / self.grid.ncols);
        self.mesh.node(col + self.pad, self.grid.nrows - 1 - row + self.pad)
    }

    /// Raster values scattered onto mesh nodes; padding and nodata become 0.
    pub fn mesh_values(&self, raster: &AsciiGrid) -> Result<Vec<f64>> {
        if !raster.geometry.same_as(&self.grid) {
            return Err(Error::Validation("raster geometry does not match the study grid".into()));
        }
        let mut out = vec![0.0; self.mesh.n_nodes()];
        for cell in 0..self.grid.n_cells() {
            out[self.cell_node(cell)] = raster.get(cell).unwrap_or(0.0);
        }
        Ok(out)
    }
}
