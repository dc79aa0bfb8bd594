//! On-disk embedding bundles and the unit-norm convention.
//!
//! A bundle directory holds `manifest.json` plus one raw payload per matrix:
//! `base.f32` (K×D), and for each split `<split>.f32` (N×D) and
//! `<split>.labels.u32` (N). Floats are 32-bit little-endian IEEE-754,
//! row-major, no header. Labels are 32-bit little-endian unsigned integers.
//!
//! Matrices are held in memory as `f64`. [`read_bundle`] returns the stored
//! values exactly (widened from `f32`); callers apply [`Bundle::normalized`]
//! before computing similarities.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASE_FILE: &str = "base.f32";

/// Rows whose Euclidean norm is at or below this are rejected by normalization.
pub const ZERO_NORM_TOL: f64 = 1e-12;

/// A validated matrix of `D`-dimensional embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::try_from(Matrix::new(rows, dim, data)?)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::try_from(Matrix::from_rows(rows)?)
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// SHA-256 over the little-endian `f64` payload.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.0.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Selects rows by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), d, data)
    }
}

impl TryFrom<Matrix> for EmbeddingMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        if m.rows() < 1 {
            return Err(Error::invalid("embedding matrix needs at least one row"));
        }
        if m.cols() < 2 {
            return Err(Error::invalid(format!(
                "embedding dimension must be at least 2, got {}",
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        Ok(Self(m))
    }
}

impl Deref for EmbeddingMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Embeddings paired with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub embeddings: EmbeddingMatrix,
    pub labels: Vec<usize>,
}

impl LabeledEmbeddings {
    pub fn new(
        embeddings: EmbeddingMatrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(Error::DimensionMismatch {
                what: "label count".into(),
                expected: embeddings.rows(),
                found: labels.len(),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                num_classes,
            });
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            embeddings: self.embeddings.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub embeddings: String,
    pub labels: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub dim: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub temperature: f64,
    pub splits: BTreeMap<String, SplitEntry>,
    /// Free-form producer notes (generator settings, template ensembling, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl BundleManifest {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid(format!("manifest dim {} < 2", self.dim)));
        }
        if self.num_classes < 1 {
            return Err(Error::invalid("manifest num_classes must be at least 1"));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::DimensionMismatch {
                what: "class_names length".into(),
                expected: self.num_classes,
                found: self.class_names.len(),
            });
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        for (name, entry) in &self.splits {
            for file in [&entry.embeddings, &entry.labels] {
                if file.is_empty()
                    || file.contains(['/', '\\'])
                    || file == BASE_FILE
                    || file == MANIFEST_FILE
                {
                    return Err(Error::invalid(format!(
                        "split {name}: bad file name {file:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Base classifier, labeled splits and their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub base: EmbeddingMatrix,
    pub splits: BTreeMap<String, LabeledEmbeddings>,
}

impl Bundle {
    /// Assembles a bundle with the conventional payload file names.
    pub fn new(
        class_names: Vec<String>,
        temperature: f64,
        base: EmbeddingMatrix,
        splits: BTreeMap<String, LabeledEmbeddings>,
    ) -> Result<Self> {
        let manifest = BundleManifest {
            dim: base.dim(),
            num_classes: base.rows(),
            class_names,
            temperature,
            splits: splits
                .iter()
                .map(|(name, s)| {
                    (
                        name.clone(),
                        SplitEntry {
                            embeddings: format!("{name}.f32"),
                            labels: format!("{name}.labels.u32"),
                            rows: s.len(),
                        },
                    )
                })
                .collect(),
            metadata: BTreeMap::new(),
        };
        let bundle = Self {
            manifest,
            base,
            splits,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn temperature(&self) -> f64 {
        self.manifest.temperature
    }

    pub fn split(&self, name: &str) -> Result<&LabeledEmbeddings> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::invalid(format!("bundle has no split named {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        check_shape("base classifier", &self.base, m.num_classes, m.dim)?;
        if m.splits.len() != self.splits.len() || m.splits.keys().ne(self.splits.keys()) {
            return Err(Error::invalid("manifest splits do not match bundle splits"));
        }
        for (name, split) in &self.splits {
            let entry = &m.splits[name];
            check_shape(
                &format!("split {name}"),
                &split.embeddings,
                entry.rows,
                m.dim,
            )?;
            if split.labels.len() != entry.rows {
                return Err(Error::DimensionMismatch {
                    what: format!("split {name} labels"),
                    expected: entry.rows,
                    found: split.labels.len(),
                });
            }
            if let Some((row, &label)) = split
                .labels
                .iter()
                .enumerate()
                .find(|(_, &l)| l >= m.num_classes)
            {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    num_classes: m.num_classes,
                });
            }
        }
        Ok(())
    }

    /// Copy with every base and image row scaled to unit length.
    pub fn normalized(&self) -> Result<Self> {
        let mut splits = BTreeMap::new();
        for (name, s) in &self.splits {
            splits.insert(
                name.clone(),
                LabeledEmbeddings {
                    embeddings: l2_normalize(&s.embeddings)?,
                    labels: s.labels.clone(),
                },
            );
        }
        Ok(Self {
            manifest: self.manifest.clone(),
            base: l2_normalize(&self.base)?,
            splits,
        })
    }
}

fn check_shape(what: &str, m: &EmbeddingMatrix, rows: usize, dim: usize) -> Result<()> {
    if m.dim() != dim {
        return Err(Error::DimensionMismatch {
            what: format!("{what} dimension"),
            expected: dim,
            found: m.dim(),
        });
    }
    if m.rows() != rows {
        return Err(Error::DimensionMismatch {
            what: format!("{what} rows"),
            expected: rows,
            found: m.rows(),
        });
    }
    Ok(())
}

/// Unit-normalizes one row, returning the normalized copy and the original norm.
pub fn normalize_row(row: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = norm(row);
    // NaN norms fall through to None as well.
    if n.is_nan() || n <= ZERO_NORM_TOL {
        return None;
    }
    Some((row.iter().map(|v| v / n).collect(), n))
}

pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data().len());
    for (i, row) in m.row_iter().enumerate() {
        let (unit, _) = normalize_row(row).ok_or_else(|| Error::ZeroNorm {
            what: "embedding matrix".into(),
            row: i,
        })?;
        data.extend(unit);
    }
    EmbeddingMatrix::new(m.rows(), m.dim(), data)
}

pub fn write_f32_payload(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_f32_payload(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected_len {
        return Err(Error::DimensionMismatch {
            what: format!("float count in {}", path.display()),
            expected: expected_len,
            found: bytes.len() / 4,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    Ok(values)
}

fn write_u32_payload(path: &Path, values: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("label {v} exceeds u32")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

fn read_u32_payload(path: &Path, expected_len: usize) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected_len {
        return Err(Error::DimensionMismatch {
            what: format!("label count in {}", path.display()),
            expected: expected_len,
            found: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let manifest: BundleManifest = read_json(&dir.join(MANIFEST_FILE))?;
    manifest.validate()?;
    let k = manifest.num_classes;
    let d = manifest.dim;

    let base = read_f32_payload(&dir.join(BASE_FILE), k * d)?;
    let base = EmbeddingMatrix::new(k, d, base)?;

    let mut splits = BTreeMap::new();
    for (name, entry) in &manifest.splits {
        let data = read_f32_payload(&dir.join(&entry.embeddings), entry.rows * d)?;
        let labels = read_u32_payload(&dir.join(&entry.labels), entry.rows)?;
        let embeddings = EmbeddingMatrix::new(entry.rows, d, data)?;
        splits.insert(name.clone(), LabeledEmbeddings::new(embeddings, labels, k)?);
    }

    let bundle = Bundle {
        manifest,
        base,
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` to `dir`, creating it if needed. Everything is validated
/// before the first file is written.
pub fn write_bundle(dir: impl AsRef<Path>, bundle: &Bundle) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(MANIFEST_FILE), &bundle.manifest)?;
    write_f32_payload(&dir.join(BASE_FILE), bundle.base.data())?;
    for (name, split) in &bundle.splits {
        let entry = &bundle.manifest.splits[name];
        write_f32_payload(&dir.join(&entry.embeddings), split.embeddings.data())?;
        write_u32_payload(&dir.join(&entry.labels), &split.labels)?;
    }
    Ok(())
}
