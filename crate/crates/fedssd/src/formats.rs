//! On-disk formats.
//!
//! Checkpoint (`.ckpt`), all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "FSSDCKPT"
//! version      u32      1
//! projector    u32      0 = linear, 1 = nonlinear
//! input_dim    u64
//! hidden_count u64
//! hidden_dims  u64 × hidden_count
//! embed_dim    u64
//! param_count  u64
//! params       f64 × param_count   (flatten order: encoder then projector,
//!                                   each layer weight row-major then bias)
//! ```
//!
//! Binary dataset (`.bin`):
//!
//! ```text
//! magic    8 bytes  "FSSDDATA"
//! version  u32      1
//! rows     u64
//! cols     u64
//! features f64 × rows·cols   (row-major)
//! labels   u64 × rows
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fedssd_core::data::Dataset;
use fedssd_core::model::{Architecture, ModelBundle, ProjectorKind};
use fedssd_core::numerics::Matrix;
use serde::Serialize;

use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSSDCKPT";
pub const DATASET_MAGIC: &[u8; 8] = b"FSSDDATA";
pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::format(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// A JSON-lines file that is rewritten atomically on every append, so a
/// reader never sees a partial line.
#[derive(Debug)]
pub struct JsonlFile {
    path: PathBuf,
    buf: String,
}

impl JsonlFile {
    /// Creates (or truncates to) an empty file.
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let file = JsonlFile { path: path.into(), buf: String::new() };
        write_atomic(&file.path, b"")?;
        Ok(file)
    }

    pub fn append<T: Serialize>(&mut self, value: &T) -> Result<()> {
        self.buf.push_str(&serde_json::to_string(value)?);
        self.buf.push('\n');
        write_atomic(&self.path, self.buf.as_bytes())
    }
}

// ---- CSV ----

/// A CSV file split into features and an integer label column, keeping the
/// header so it can be written back unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub header: Vec<String>,
    pub label_index: usize,
    pub dataset: Dataset,
}

pub fn read_csv(path: &Path, label_column: &str) -> Result<CsvDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    let label_index = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::format(path, format!("no column named {label_column:?}")))?;
    let cols = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (i, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if i == label_index {
                let y = cell.parse::<usize>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("label {cell:?} is not a nonnegative integer"),
                })?;
                labels.push(y);
            } else {
                let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("column {:?}: {cell:?} is not a finite number", header[i]),
                })?;
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), line: 2, message: "no data rows".into() });
    }
    let features = Matrix::from_vec(labels.len(), cols, features)?;
    Ok(CsvDataset { header, label_index, dataset: Dataset::new(features, labels)? })
}

pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<Dataset> {
    Ok(read_csv(path, label_column)?.dataset)
}

pub fn write_csv(path: &Path, table: &CsvDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&table.header).map_err(|e| csv_error(path, e))?;
    let ds = &table.dataset;
    for (row, &label) in ds.features.row_iter().zip(&ds.labels) {
        let mut feats = row.iter();
        let record: Vec<String> = (0..table.header.len())
            .map(|i| if i == table.label_index { label.to_string() } else { feats.next().expect("width").to_string() })
            .collect();
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            let csv::ErrorKind::Io(io) = e.into_kind() else { unreachable!() };
            Error::io(path, io)
        }
        _ => Error::Parse { path: path.to_path_buf(), line, message: e.to_string() },
    }
}

// ---- little-endian containers ----

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("size {v} out of range")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::format(self.path, "bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(model: &ModelBundle) -> Vec<u8> {
    let arch = model.architecture();
    let params = model.flatten();
    let mut out = Vec::with_capacity(64 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let kind: u32 = match arch.projector {
        ProjectorKind::Linear => 0,
        ProjectorKind::Nonlinear => 1,
    };
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(arch.input_dim as u64).to_le_bytes());
    out.extend_from_slice(&(arch.hidden_dims.len() as u64).to_le_bytes());
    for &h in &arch.hidden_dims {
        out.extend_from_slice(&(h as u64).to_le_bytes());
    }
    out.extend_from_slice(&(arch.embed_dim as u64).to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<ModelBundle> {
    let mut c = Cursor { path: origin, bytes, pos: 0 };
    c.header(CHECKPOINT_MAGIC)?;
    let projector = match c.u32()? {
        0 => ProjectorKind::Linear,
        1 => ProjectorKind::Nonlinear,
        k => return Err(Error::format(origin, format!("unknown projector kind {k}"))),
    };
    let input_dim = c.usize()?;
    let hidden_count = c.usize()?;
    let hidden_dims = (0..hidden_count).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
    let embed_dim = c.usize()?;
    let arch = Architecture { input_dim, hidden_dims, embed_dim, projector };
    let template = ModelBundle::zeros(&arch)?;
    let count = c.usize()?;
    if count != template.param_count() {
        return Err(Error::format(origin, format!("{count} parameters for an architecture holding {}", template.param_count())));
    }
    let params = c.f64s(count)?;
    c.finish()?;
    Ok(template.unflatten(&params)?)
}

pub fn save_checkpoint(path: &Path, model: &ModelBundle) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn encode_binary_dataset(data: &Dataset) -> Vec<u8> {
    let (rows, cols) = data.features.shape();
    let mut out = Vec::with_capacity(28 + 8 * rows * (cols + 1));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data.features.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &data.labels {
        out.extend_from_slice(&(y as u64).to_le_bytes());
    }
    out
}

pub fn decode_binary_dataset(bytes: &[u8], origin: &Path) -> Result<Dataset> {
    let mut c = Cursor { path: origin, bytes, pos: 0 };
    c.header(DATASET_MAGIC)?;
    let rows = c.usize()?;
    let cols = c.usize()?;
    let n = rows.checked_mul(cols).ok_or_else(|| Error::format(origin, "size overflow"))?;
    let features = c.f64s(n)?;
    let labels = (0..rows).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    Ok(Dataset::new(Matrix::from_vec(rows, cols, features)?, labels)?)
}

pub fn save_binary_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, &encode_binary_dataset(data))
}

pub fn load_binary_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_binary_dataset(&bytes, path)
}
