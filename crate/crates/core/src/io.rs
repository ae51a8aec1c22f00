//! File output helpers shared by every module that writes artifacts.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_atomic_str(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Serializes rows with a `csv::Writer` and writes them atomically.
pub fn write_csv<T: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingInputs(vec![path.to_path_buf()]));
    }
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::Csv)
}

/// JSON sidecar describing a raw little-endian `f64` array file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArrayHeader {
    pub dtype: String,
    /// Dimension names and sizes, slowest-varying first.
    pub dims: Vec<(String, usize)>,
    /// Coordinates or other metadata.
    #[serde(default)]
    pub attrs: serde_json::Value,
}

impl ArrayHeader {
    pub fn new(dims: &[(&str, usize)], attrs: serde_json::Value) -> Self {
        Self {
            dtype: "f64-le".into(),
            dims: dims.iter().map(|(n, s)| (n.to_string(), *s)).collect(),
            attrs,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().map(|d| d.1).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self, name: &str) -> Option<usize> {
        self.dims.iter().find(|d| d.0 == name).map(|d| d.1)
    }
}

/// Path of the sidecar of an array file: `x.bin` -> `x.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn write_array(path: &Path, header: &ArrayHeader, data: &[f64]) -> Result<()> {
    if header.len() != data.len() {
        return Err(Error::Validation(format!(
            "array has {} values but its dimensions {:?} need {}",
            data.len(),
            header.dims,
            header.len()
        )));
    }
    let mut bytes = Vec::with_capacity(8 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    write_atomic_str(&sidecar_path(path), &serde_json::to_string_pretty(header)?)
}

pub fn read_array(path: &Path) -> Result<(ArrayHeader, Vec<f64>)> {
    let side = sidecar_path(path);
    let missing: Vec<_> = [path, side.as_path()].into_iter().filter(|p| !p.exists()).map(Path::to_path_buf).collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    let header: ArrayHeader = serde_json::from_str(&read_to_string(&side)?)?;
    if header.dtype != "f64-le" {
        return Err(Error::Validation(format!("{}: unsupported dtype {}", side.display(), header.dtype)));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 8 * header.len() {
        return Err(Error::Validation(format!(
            "{}: {} bytes but the sidecar describes {} values",
            path.display(),
            bytes.len(),
            header.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, data))
}
