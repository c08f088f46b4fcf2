//! Series files: a JSON header with a companion little-endian `f64` blob,
//! a labels file of one `0`/`1` per line, or CSV with a header row.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use dualflow_core::data::RawSeries;
use dualflow_core::Tensor;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesHeader {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub dtype: String,
    pub layout: String,
}

/// The blob that sits next to a header: same stem, `.bin` extension.
pub fn blob_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_bytes(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

/// Writes `header` (JSON) and its `.bin` blob.
pub fn write_series(header: &Path, values: &Tensor) -> Result<()> {
    let h = SeriesHeader {
        t: values.rows(),
        c: values.cols(),
        dtype: "f64".into(),
        layout: "row-major".into(),
    };
    fs::write(header, serde_json::to_string_pretty(&h)? + "\n")
        .with_context(|| format!("writing {}", header.display()))?;
    fs::write(blob_path(header), f64_bytes(values.data()))
        .with_context(|| format!("writing {}", blob_path(header).display()))?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 2);
    for l in labels {
        s.push(if *l != 0 { '1' } else { '0' });
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| match l {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(CliError::Data(format!(
                "{} line {}: expected 0 or 1, found {other:?}",
                path.display(),
                i + 1
            ))
            .into()),
        })
        .collect()
}

fn read_header_series(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let h: SeriesHeader = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("malformed header {}: {e}", path.display())))?;
    if h.dtype != "f64" || h.layout != "row-major" {
        return Err(CliError::Data(format!(
            "{}: unsupported dtype/layout {}/{}",
            path.display(),
            h.dtype,
            h.layout
        ))
        .into());
    }
    let blob = blob_path(path);
    let bytes = fs::read(&blob).with_context(|| format!("reading {}", blob.display()))?;
    let values = f64_from_bytes(&bytes)
        .filter(|v| v.len() == h.t * h.c)
        .ok_or_else(|| {
            CliError::Data(format!(
                "{}: expected {}×{} values ({} bytes), found {} bytes",
                blob.display(),
                h.t,
                h.c,
                h.t * h.c * 8,
                bytes.len()
            ))
        })?;
    Ok(Tensor::matrix(h.t, h.c, values)?)
}

/// Reads a numeric CSV whose first row names the columns.
pub fn read_csv(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let c = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut t = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != c {
            return Err(CliError::Data(format!(
                "{} row {}: expected {c} fields, found {}",
                path.display(),
                i + 1,
                rec.len()
            ))
            .into());
        }
        for f in rec.iter() {
            data.push(f.trim().parse::<f64>().map_err(|e| {
                CliError::Data(format!("{} row {}: {f:?}: {e}", path.display(), i + 1))
            })?);
        }
        t += 1;
    }
    Ok(Tensor::matrix(t, c, data)?)
}

pub fn write_csv(path: &Path, columns: &[String], rows: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(columns)?;
    for r in 0..rows.rows() {
        w.write_record(rows.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads values from a header+blob pair or a `.csv`, with optional labels.
pub fn load_series(data: &Path, labels: Option<&Path>) -> Result<RawSeries> {
    let values = if data.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_csv(data)?
    } else {
        read_header_series(data)?
    };
    let labels = labels.map(read_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != values.rows() {
            return Err(CliError::Data(format!(
                "labels length {} does not match series length {}",
                l.len(),
                values.rows()
            ))
            .into());
        }
    }
    let entity = data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(RawSeries::new(values, labels, entity)?)
}
