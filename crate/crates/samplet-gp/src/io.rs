//! Data sets, Matrix Market files, configuration and model checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayesopt::BoConfig;
use crate::cluster_tree::PointCloud;
use crate::error::{Error, Result};
use crate::gp::{CompressionConfig, GPModel, Normalizer, TrainConfig};
use crate::kernels::Hyperparameters;
use crate::sparse::SparseSymMatrix;

/// Tabular features and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Rows skipped because of non-finite values.
    pub dropped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn points(&self) -> Result<PointCloud> {
        PointCloud::new(&self.features)
    }
}

fn parse_cell(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {row}, column '{col}': cannot parse '{s}'")))
}

fn open_csv(path: &Path) -> Result<(csv::Reader<File>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(Error::Parse(format!("{}: missing header row", path.display())));
    }
    Ok((rdr, headers))
}

/// Reads a CSV file with a header row. All columns except `target_column`
/// are features. Rows holding NaN or infinite values are dropped and
/// counted. Row numbers in errors count data rows from one.
pub fn ingest_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let (mut rdr, headers) = open_csv(path)?;
    let t = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::InvalidArgument(format!("target column '{target_column}' not found")))?;
    let feature_names: Vec<String> =
        headers.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, h)| h.clone()).collect();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut dropped = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("row {}: {e}", r + 1)))?;
        if rec.len() != headers.len() {
            return Err(Error::Parse(format!("row {}: expected {} fields, got {}", r + 1, headers.len(), rec.len())));
        }
        let mut vals = Vec::with_capacity(headers.len());
        for (c, cell) in rec.iter().enumerate() {
            vals.push(parse_cell(cell, r + 1, &headers[c])?);
        }
        if vals.iter().any(|v| !v.is_finite()) {
            dropped += 1;
            continue;
        }
        targets.push(vals[t]);
        features.push(vals.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, v)| *v).collect());
    }
    Ok(Dataset { features, targets, feature_names, target_name: target_column.to_string(), dropped })
}

/// Reads the named columns, or all of them when `columns` is `None`.
pub fn read_columns(path: impl AsRef<Path>, columns: Option<&[String]>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let (mut rdr, headers) = open_csv(path)?;
    let names: Vec<String> = match columns {
        Some(c) => c.to_vec(),
        None => headers.clone(),
    };
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::InvalidArgument(format!("column '{n}' not found")))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("row {}: {e}", r + 1)))?;
        let row = idx
            .iter()
            .map(|&c| parse_cell(rec.get(c).unwrap_or(""), r + 1, &headers[c]))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((names, rows))
}

/// Writes a CSV file with full-precision floats.
pub fn write_csv(path: impl AsRef<Path>, headers: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(headers).map_err(|e| Error::Io(e.to_string()))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Matrix Market coordinate output of the lower triangle, 1-based, sorted by
/// column and then row.
pub fn write_matrix_market<W: Write>(m: &SparseSymMatrix, mut w: W) -> Result<()> {
    let lower = m.lower_triplets();
    writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
    writeln!(w, "{} {} {}", m.dim(), m.dim(), lower.len())?;
    for (r, c, v) in lower {
        writeln!(w, "{} {} {}", r + 1, c + 1, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_sparse(m: &SparseSymMatrix, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path.as_ref())?;
    write_matrix_market(m, BufWriter::new(f))
}

pub fn read_matrix_market<R: BufRead>(r: R) -> Result<SparseSymMatrix> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty file".into()))??;
    let h = header.to_ascii_lowercase();
    if !h.starts_with("%%matrixmarket matrix coordinate real symmetric") {
        return Err(Error::Parse(format!("unsupported header '{header}'")));
    }
    let mut size: Option<(usize, usize)> = None;
    let mut triplets = Vec::new();
    for line in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match size {
            None => {
                if parts.len() != 3 {
                    return Err(Error::Parse(format!("bad size line '{t}'")));
                }
                let p = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad size line '{t}'")));
                let (n, m, nnz) = (p(parts[0])?, p(parts[1])?, p(parts[2])?);
                if n != m {
                    return Err(Error::Parse("symmetric matrix must be square".into()));
                }
                size = Some((n, nnz));
                triplets.reserve(nnz);
            }
            Some((n, _)) => {
                if parts.len() != 3 {
                    return Err(Error::Parse(format!("bad entry '{t}'")));
                }
                let r: usize = parts[0].parse().map_err(|_| Error::Parse(format!("bad entry '{t}'")))?;
                let c: usize = parts[1].parse().map_err(|_| Error::Parse(format!("bad entry '{t}'")))?;
                let v: f64 = parts[2].parse().map_err(|_| Error::Parse(format!("bad entry '{t}'")))?;
                if r == 0 || c == 0 || r > n || c > n {
                    return Err(Error::Parse(format!("index out of range in '{t}'")));
                }
                let (r, c) = if r >= c { (r - 1, c - 1) } else { (c - 1, r - 1) };
                triplets.push((r, c, v));
            }
        }
    }
    let (n, nnz) = size.ok_or_else(|| Error::Parse("missing size line".into()))?;
    if triplets.len() != nnz {
        return Err(Error::Parse(format!("expected {nnz} entries, found {}", triplets.len())));
    }
    SparseSymMatrix::from_lower_triplets(n, &triplets)
}

pub fn import_sparse(path: impl AsRef<Path>) -> Result<SparseSymMatrix> {
    read_matrix_market(BufReader::new(File::open(path.as_ref())?))
}

/// Settings read from a JSON file; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: Option<Hyperparameters>,
    pub compression: Option<CompressionConfig>,
    pub train: Option<TrainConfig>,
    pub bo: Option<BoConfig>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let mut s = String::new();
    File::open(path.as_ref())?.read_to_string(&mut s)?;
    serde_json::from_str(&s).map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

const CHECKPOINT_VERSION: u32 = 1;

/// JSON part of a model checkpoint.
///
/// The coefficient vector is stored next to it as raw little-endian `f64`
/// values in `<checkpoint>.coef`. Loading rebuilds the tree and the
/// factorization from the stored points and checks the coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub hyperparameters: Hyperparameters,
    pub compression: CompressionConfig,
    pub normalizer: Normalizer,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub log_likelihood: f64,
    pub dim: usize,
    /// Training points, row-major.
    pub points: Vec<f64>,
    /// Normalized training targets.
    pub targets: Vec<f64>,
    /// Leaf threshold and node count of the cluster tree.
    pub tree: TreeDescriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeDescriptor {
    pub leaf_threshold: usize,
    pub nodes: usize,
    pub depth: usize,
}

fn coef_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".coef");
    PathBuf::from(s)
}

pub fn save_model(model: &GPModel, feature_names: &[String], target_name: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tree = model.samplet_tree().cluster_tree();
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        hyperparameters: *model.hyperparameters(),
        compression: *model.compression(),
        normalizer: *model.normalizer(),
        feature_names: feature_names.to_vec(),
        target_name: target_name.to_string(),
        log_likelihood: model.log_likelihood(),
        dim: model.train_points().dim(),
        points: model.train_points().as_flat().to_vec(),
        targets: model.targets().to_vec(),
        tree: TreeDescriptor { leaf_threshold: tree.leaf_threshold(), nodes: tree.len(), depth: tree.depth() },
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &ck).map_err(|e| Error::Io(e.to_string()))?;
    w.flush()?;
    let mut b = BufWriter::new(File::create(coef_path(path))?);
    for v in model.ctilde() {
        b.write_all(&v.to_le_bytes())?;
    }
    b.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(GPModel, Checkpoint)> {
    let path = path.as_ref();
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    let ck: Checkpoint = serde_json::from_str(&s).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {}", ck.version)));
    }
    let points = PointCloud::from_flat(ck.dim, ck.points.clone())?;
    let model = GPModel::refit(&points, &ck.targets, &ck.hyperparameters, &ck.compression, ck.normalizer)?;
    let mut bytes = Vec::new();
    File::open(coef_path(path))?.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * model.ctilde().len() {
        return Err(Error::Parse("coefficient file has the wrong length".into()));
    }
    let stored: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let norm = stored.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let diff = stored.iter().zip(model.ctilde()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if diff > 1e-8 * norm {
        return Err(Error::Parse("stored coefficients do not match the rebuilt model".into()));
    }
    Ok((model, ck))
}
