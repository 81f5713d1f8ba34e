//! Deterministic result output: full-precision number formatting, CSV and
//! JSON writers, and a hashed manifest of everything a run produced.
//!
//! Every floating-point value is rendered with 17 significant digits
//! (`{:.16e}`), which round-trips `f64` exactly, so identical runs produce
//! byte-identical files. The manifest records a SHA-256 digest per file and
//! a combined digest over the sorted (name, digest) pairs; the wall-clock
//! timestamp is recorded next to the digests but excluded from them, so
//! reruns of a deterministic computation agree on every hash.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Result, SolverError};
use crate::grid::SpatialGrid;
use crate::setup::TimeGrid;

/// Render a float with 17 significant digits; parsing the result recovers
/// the original bit pattern.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Hex SHA-256 digest of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// A CSV table in long format: one row of headers, then rows of
/// full-precision values.
pub fn long_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                text.push(',');
            }
            text.push_str(&format_float(v));
            first = false;
        }
        text.push('\n');
    }
    text
}

/// Space-time field in long format `t,x,value` (one row per node per step),
/// for a field indexed `[step][node]`.
pub fn field_csv(times: &TimeGrid, grid: &SpatialGrid, field: &Array2<f64>) -> String {
    let (nt, n) = field.dim();
    let rows = (0..nt).flat_map(move |k| {
        (0..n).map(move |i| vec![times.time(k), grid.nodes[i], field[[k, i]]])
    });
    long_csv(&["t", "x", "value"], rows)
}

/// Digest listing of the files a run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// Per-file SHA-256 digests, keyed by file name.
    pub files: BTreeMap<String, String>,
    /// SHA-256 over the sorted `name:digest` lines: one value that pins the
    /// entire run output.
    pub content_hash: String,
    /// Wall-clock seconds since the Unix epoch at manifest time. Excluded
    /// from `content_hash` so deterministic reruns hash identically.
    pub generated_at_epoch_s: u64,
}

impl Manifest {
    fn from_files(files: BTreeMap<String, String>) -> Self {
        let mut lines = String::new();
        for (name, digest) in &files {
            lines.push_str(name);
            lines.push(':');
            lines.push_str(digest);
            lines.push('\n');
        }
        Self {
            content_hash: sha256_hex(lines.as_bytes()),
            files,
            generated_at_epoch_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

/// Directory of result files, hashed as they are written and sealed with a
/// `manifest.json`.
#[derive(Debug)]
pub struct ResultBundle {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl ResultBundle {
    /// Create (or reuse) the output directory.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| SolverError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir,
            files: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Write a text file into the bundle and record its digest.
    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|source| SolverError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.files.insert(name.to_string(), sha256_hex(text.as_bytes()));
        Ok(())
    }

    /// Serialize a report as pretty-printed JSON into the bundle.
    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| {
            SolverError::InvalidParameters(format!("cannot serialize {name}: {e}"))
        })?;
        self.write_text(name, &text)
    }

    /// Seal the bundle: write `manifest.json` and return the manifest.
    pub fn finish(mut self) -> Result<Manifest> {
        let manifest = Manifest::from_files(std::mem::take(&mut self.files));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| {
            SolverError::InvalidParameters(format!("cannot serialize manifest: {e}"))
        })?;
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, &text).map_err(|source| SolverError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(manifest)
    }
}
