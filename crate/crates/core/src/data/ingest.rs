//! IDX and CSV readers.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const IDX_UBYTE: u8 = 0x08;

/// Decoded IDX file with an unsigned-byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, "missing IDX magic"));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(format_err(
            path,
            format!("unsupported IDX element type 0x{:02x}", bytes[2]),
        ));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(format_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - header != expected {
        return Err(format_err(
            path,
            format!(
                "IDX payload has {} bytes, dims {dims:?} need {expected}",
                bytes.len() - header
            ),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path)
}

/// Serialize an unsigned-byte IDX array (magic `0x0000_08nn`, big-endian dims).
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Images file (3-D, magic `0x00000803`) plus labels file (1-D, magic
/// `0x00000801`). Pixels are scaled to `[0, 1]`; every pixel of an image is
/// one feature.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let img = read_idx(ipath)?;
    let lab = read_idx(lpath)?;
    if img.dims.len() != 3 {
        return Err(format_err(
            ipath,
            format!("expected 3-D image array, got {:?}", img.dims),
        ));
    }
    if lab.dims.len() != 1 {
        return Err(format_err(
            lpath,
            format!("expected 1-D label array, got {:?}", lab.dims),
        ));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(format_err(
            lpath,
            format!("{} labels for {} images", lab.dims[0], img.dims[0]),
        ));
    }
    let dim = img.dims[1] * img.dims[2];
    let features = img.data.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = lab.data.iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, dim, labels, classes)
}

/// One sample per row, features first and the integer label in the final
/// column. A non-numeric first row is treated as a header.
pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(format_err(
                path,
                format!("row {} has fewer than 2 columns", line + 1),
            ));
        }
        let label_field = &record[record.len() - 1];
        let Ok(label) = label_field.parse::<usize>() else {
            if line == 0 {
                continue;
            }
            return Err(format_err(
                path,
                format!(
                    "row {}: label {label_field:?} is not a class index",
                    line + 1
                ),
            ));
        };
        let width = record.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(format_err(
                    path,
                    format!("row {} has {width} features, expected {d}", line + 1),
                ))
            }
            _ => {}
        }
        for field in record.iter().take(width) {
            let v: f64 = field.parse().map_err(|_| {
                format_err(path, format!("row {}: {field:?} is not a number", line + 1))
            })?;
            features.push(v);
        }
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| format_err(path, "no data rows"))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, dim, labels, classes)
}
