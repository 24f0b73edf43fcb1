//! Feature CSV: header `f0,...,f{D-1},label`, one sample per line.

use std::fmt::Write as _;
use std::path::Path;

use super::{write_atomic, Dataset};
use crate::autodiff::Tensor;
use crate::error::{NdaError, Result};

/// Labels above this are rejected rather than allocating per-class state.
pub const MAX_LABEL: usize = 65_535;

pub fn parse_features(text: &str, name: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines
        .next()
        .ok_or_else(|| NdaError::parse(1, "empty feature file"))?;
    let columns: Vec<&str> = header.split(',').collect();
    let dim = columns.len().saturating_sub(1);
    if dim == 0 || columns[dim] != "label" {
        return Err(NdaError::parse(1, "header must be `f0,...,f{D-1},label`"));
    }
    for (i, c) in columns[..dim].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(NdaError::parse(
                1,
                format!("column {i} must be named `f{i}`, found `{c}`"),
            ));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim + 1 {
            return Err(NdaError::parse(
                n,
                format!("expected {} cells, found {}", dim + 1, cells.len()),
            ));
        }
        for cell in &cells[..dim] {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| NdaError::parse(n, format!("non-numeric cell `{cell}`")))?;
            if !v.is_finite() {
                return Err(NdaError::parse(n, format!("non-finite cell `{cell}`")));
            }
            data.push(v);
        }
        let raw = cells[dim].trim();
        let label: usize = raw.parse().map_err(|_| {
            NdaError::parse(
                n,
                format!("label must be a non-negative integer, found `{raw}`"),
            )
        })?;
        if label > MAX_LABEL {
            return Err(NdaError::parse(
                n,
                format!("label {label} exceeds {MAX_LABEL}"),
            ));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(NdaError::parse(1, "feature file has no samples"));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Tensor::matrix(labels.len(), dim, data)?;
    let mut ds = Dataset::new(name, features, labels, num_classes)?;
    ds.provenance = format!("file {name}");
    Ok(ds)
}

/// Renders every value with Rust's shortest round-trip formatting, so
/// `parse_features(render_features(d))` reproduces `d` bit for bit.
pub fn render_features(ds: &Dataset) -> String {
    let dim = ds.dim();
    let mut out = String::with_capacity(ds.len() * dim * 20);
    for i in 0..dim {
        write!(out, "f{i},").unwrap();
    }
    out.push_str("label\n");
    for (r, label) in ds.labels.iter().enumerate() {
        for v in ds.features.row(r) {
            write!(out, "{v:?},").unwrap();
        }
        writeln!(out, "{label}").unwrap();
    }
    out
}

pub fn load_features(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| NdaError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "features".to_string());
    parse_features(&text, &name)
}

pub fn save_features(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, render_features(ds).as_bytes())
}
