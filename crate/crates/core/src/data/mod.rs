//! Datasets, synthetic generators, file formats and run-directory plumbing.

mod blobs;
pub mod config;
mod dataset;
mod features;
mod seeds;

use std::io::Write as _;
use std::path::Path;

pub use blobs::{blob_centroids, gen_blobs, gen_ood_set, ood_direction, BlobSpec};
pub use dataset::Dataset;
pub use features::{load_features, parse_features, render_features, save_features, MAX_LABEL};
pub use seeds::sub_seed;

use crate::error::{NdaError, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| NdaError::contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| NdaError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| NdaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| NdaError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| NdaError::io(path, e))
}
