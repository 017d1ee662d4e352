//! CSV and JSON artifacts.
//!
//! Reals are written with 17 significant digits, which round-trips every
//! finite `f64` exactly. Every artifact starts with a provenance line (CSV:
//! `# ...` comment) carrying the tool version and the config hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transfer::{DensityVector, Partition, TransferError, UlamMatrix};

/// Mass tolerance applied when reading densities back in.
pub const READ_MASS_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Density {
        path: PathBuf,
        source: TransferError,
    },
}

type Result<T> = std::result::Result<T, IoError>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Tool version and config hash stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
}

impl Provenance {
    pub fn for_config(config_bytes: &[u8]) -> Self {
        use sha2::{Digest, Sha256};
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: hex::encode(Sha256::digest(config_bytes)),
        }
    }

    pub fn comment_line(&self) -> String {
        format!(
            "# {} {} config_sha256={}\n",
            self.tool, self.version, self.config_sha256
        )
    }
}

/// `{:.16e}`; non-finite values as `inf`, `-inf`, `nan`.
pub fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Builds a CSV body in memory so the file is written in one piece.
pub struct CsvTable {
    text: String,
}

impl CsvTable {
    pub fn new(provenance: Option<&Provenance>, header: &[&str]) -> Self {
        let mut text = provenance.map(|p| p.comment_line()).unwrap_or_default();
        text.push_str(&header.join(","));
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.text.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(file_err(dir))?;
        }
    }
    fs::write(path, bytes).map_err(file_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Grid description stored next to exported densities and operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells_per_axis: Vec<usize>,
}

impl PartitionSpec {
    pub fn of(p: &Partition) -> Self {
        Self {
            lower: p.lower().to_vec(),
            upper: p.upper().to_vec(),
            cells_per_axis: p.cells_per_axis().to_vec(),
        }
    }

    pub fn build(&self) -> std::result::Result<Partition, TransferError> {
        Partition::new(
            self.lower.clone(),
            self.upper.clone(),
            self.cells_per_axis.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub partition: PartitionSpec,
    pub cells: usize,
}

/// Sidecar path: same stem, `.json` extension.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `cell_index,value` rows plus the partition sidecar.
pub fn write_density(
    path: &Path,
    theta: &DensityVector,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let mut table = CsvTable::new(provenance, &["cell_index", "value"]);
    for (i, v) in theta.values().iter().enumerate() {
        table.row(&[i.to_string(), fmt_real(*v)]);
    }
    table.write(path)?;
    write_json(
        &sidecar_path(path),
        &DensitySidecar {
            provenance: provenance.cloned(),
            partition: PartitionSpec::of(theta.partition()),
            cells: theta.len(),
        },
    )
}

/// Reads a density written by [`write_density`]. The partition comes from the
/// sidecar; pass `expected` to insist on a particular grid.
pub fn read_density(path: &Path, expected: Option<&Arc<Partition>>) -> Result<DensityVector> {
    let side = sidecar_path(path);
    let sidecar: DensitySidecar =
        serde_json::from_slice(&fs::read(&side).map_err(file_err(&side))?)
            .map_err(|e| format_err(&side, e.to_string()))?;
    let partition = sidecar
        .partition
        .build()
        .map_err(|source| IoError::Density {
            path: side.clone(),
            source,
        })?;
    let partition = match expected {
        Some(p) if **p != partition => {
            return Err(format_err(
                &side,
                "partition differs from the configured domain",
            ))
        }
        Some(p) => p.clone(),
        None => Arc::new(partition),
    };
    let values = read_density_values(path)?;
    DensityVector::with_mass_tolerance(partition, values, READ_MASS_TOL).map_err(|source| {
        IoError::Density {
            path: path.to_path_buf(),
            source,
        }
    })
}

fn read_density_values(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["cell_index", "value"] {
        return Err(format_err(path, "expected header `cell_index,value`"));
    }
    let mut values = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        let bad = |what: &str| format_err(path, format!("row {row}: {what}"));
        let idx: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| bad("cell_index is not an integer"))?;
        if idx != row {
            return Err(bad(&format!("cell_index {idx} out of order")));
        }
        let v: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad("value is not a number"))?;
        if !v.is_finite() {
            return Err(bad("value is not finite"));
        }
        if v < 0.0 {
            return Err(bad(&format!("negative value {v}")));
        }
        values.push(v);
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UlamSidecar {
    pub provenance: Provenance,
    pub partition: PartitionSpec,
    pub samples_per_row: u32,
    pub nnz: usize,
    pub t0: f64,
    pub t1: f64,
    pub profile: String,
    pub epsilon: Option<f64>,
    pub leakage: Vec<f64>,
}

/// Writes `row,col,value` triplets plus a sidecar with partition, leakage and
/// flow metadata.
pub fn write_ulam(path: &Path, p: &UlamMatrix, provenance: &Provenance) -> Result<()> {
    let mut text = provenance.comment_line();
    text.push_str("row,col,value\n");
    for i in 0..p.size() {
        for (j, v) in p.row(i) {
            let _ = writeln!(text, "{i},{j},{}", fmt_real(v));
        }
    }
    write_file(path, text.as_bytes())?;
    let meta = p.meta();
    write_json(
        &sidecar_path(path),
        &UlamSidecar {
            provenance: provenance.clone(),
            partition: PartitionSpec::of(p.partition()),
            samples_per_row: p.samples_per_row(),
            nnz: p.nnz(),
            t0: meta.t0,
            t1: meta.t1,
            profile: meta.profile.clone(),
            epsilon: meta.epsilon,
            leakage: p.leakage_vector(),
        },
    )
}
