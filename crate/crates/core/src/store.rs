//! Pooled hidden-state matrices and their on-disk representation.
//!
//! A store is a pair of files sharing a stem: `NAME.fst` holds the FSTORE v1
//! payload and `NAME.manifest.json` the [`StoreManifest`] sidecar.
//!
//! FSTORE v1 layout (all little-endian):
//!
//! | offset | size          | content                        |
//! |--------|---------------|--------------------------------|
//! | 0      | 4             | magic `FST1`                   |
//! | 4      | 4             | rows (u32)                     |
//! | 8      | 4             | cols (u32)                     |
//! | 12     | rows·cols·4   | f32 values, row-major          |

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FST1";
pub const HEADER_LEN: usize = 12;
pub const PAYLOAD_EXT: &str = "fst";
pub const MANIFEST_SUFFIX: &str = ".manifest.json";

/// Row-major `rows × cols` matrix of finite `f32` values, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::validation("rows", "must be at least 1"));
        }
        if cols == 0 {
            return Err(Error::validation("cols", "must be at least 1"));
        }
        if data.len() != rows * cols {
            return Err(Error::validation(
                "data",
                format!("length {} does not equal rows×cols = {}", data.len(), rows * cols),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension {
                expected: cols,
                found: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Narrows an `f64` matrix to storage precision.
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().map(|&v| v as f32));
        }
        Self::new(m.nrows(), m.ncols(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn column_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.cols {
            return Err(Error::validation(
                "columns",
                format!("range {start}..{end} invalid for {} columns", self.cols),
            ));
        }
        let data = (0..self.rows)
            .flat_map(|i| self.row(i)[start..end].iter().copied())
            .collect();
        Self::new(self.rows, end - start, data)
    }

    /// Widens to `f64` for numerical work.
    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|&v| f64::from(v)))
    }

    /// Serializes to the FSTORE v1 byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an FSTORE v1 payload. Rejects bad magic, zero dimensions,
    /// truncation, trailing bytes and non-finite values.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:02x?}, expected `FST1`",
                &bytes[..4]
            )));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Format(format!("zero dimension {rows}×{cols}")));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format(format!("dimensions {rows}×{cols} overflow")))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, data)
    }
}

/// Which part of the model a representation was pooled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    /// Vision-encoder layer, mean-pooled over all visual tokens.
    V,
    /// Decoder layer, mean-pooled over prompt text positions.
    LT,
    /// Decoder layer, mean-pooled over image token positions.
    LV,
    /// Decoder layer, last text token.
    Ltau,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::V => "V",
            Component::LT => "LT",
            Component::LV => "LV",
            Component::Ltau => "Ltau",
        }
    }

    pub fn expected_pooling(self) -> Pooling {
        match self {
            Component::Ltau => Pooling::LastToken,
            _ => Pooling::Mean,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "V" => Ok(Component::V),
            "LT" => Ok(Component::LT),
            "LV" => Ok(Component::LV),
            "Ltau" => Ok(Component::Ltau),
            other => Err(Error::validation(
                "component",
                format!("`{other}` is not one of V, LT, LV, Ltau"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    LastToken,
}

/// Sidecar metadata describing one feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub model_id: String,
    pub component: Component,
    pub layer_index: u32,
    pub prompt_id: String,
    pub pooling: Pooling,
    pub dataset_id: String,
    pub augmentation: String,
    pub image_ids: Vec<String>,
}

impl StoreManifest {
    pub fn validate(&self) -> Result<()> {
        if self.pooling != self.component.expected_pooling() {
            return Err(Error::validation(
                "pooling",
                format!(
                    "component {} requires pooling {:?}, found {:?}",
                    self.component,
                    self.component.expected_pooling(),
                    self.pooling
                ),
            ));
        }
        let mut seen = HashSet::with_capacity(self.image_ids.len());
        for id in &self.image_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::validation("image_ids", format!("duplicate id `{id}`")));
            }
        }
        Ok(())
    }

    fn validate_against(&self, matrix: &FeatureMatrix) -> Result<()> {
        self.validate()?;
        if self.image_ids.len() != matrix.rows() {
            return Err(Error::validation(
                "image_ids",
                format!(
                    "{} ids for a matrix with {} rows",
                    self.image_ids.len(),
                    matrix.rows()
                ),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Self =
            serde_json::from_str(text).map_err(|e| Error::parse("manifest", e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Short identity used in report rows and error messages.
    pub fn label(&self) -> String {
        format!("{}/{}{}", self.model_id, self.component, self.layer_index)
    }
}

/// Ordered, non-empty list of unique image ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSelection {
    ids: Vec<String>,
}

impl ImageSelection {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::validation("selection", "must not be empty"));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::validation("selection", format!("duplicate id `{id}`")));
            }
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Path of the manifest sidecar belonging to a payload path.
pub fn manifest_path(payload: &Path) -> PathBuf {
    let stem = payload
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    payload.with_file_name(format!("{stem}{MANIFEST_SUFFIX}"))
}

pub fn write_store(matrix: &FeatureMatrix, manifest: &StoreManifest, path: &Path) -> Result<()> {
    manifest.validate_against(matrix)?;
    fs::write(path, matrix.to_bytes()).map_err(|e| Error::io(path, e))?;
    let sidecar = manifest_path(path);
    fs::write(&sidecar, manifest.to_json()).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<(FeatureMatrix, StoreManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let matrix = FeatureMatrix::from_bytes(&bytes)?;
    let sidecar = manifest_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let manifest = StoreManifest::from_json(&text)?;
    manifest.validate_against(&matrix)?;
    Ok((matrix, manifest))
}

/// Lists `*.fst` payloads in `dir`, sorted by file name.
pub fn discover_stores(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == PAYLOAD_EXT) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Selects rows by image id, in selection order.
pub fn align(
    matrix: &FeatureMatrix,
    manifest: &StoreManifest,
    selection: &ImageSelection,
) -> Result<FeatureMatrix> {
    if manifest.image_ids.len() != matrix.rows() {
        return Err(Error::Dimension {
            expected: matrix.rows(),
            found: manifest.image_ids.len(),
        });
    }
    let index = id_index(&manifest.image_ids);
    let mut data = Vec::with_capacity(selection.ids().len() * matrix.cols());
    for id in selection.ids() {
        let &row = index
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownImage(id.clone()))?;
        data.extend_from_slice(matrix.row(row));
    }
    FeatureMatrix::new(selection.ids().len(), matrix.cols(), data)
}

/// Joins two stores over the same images column-wise: `[a | b]`.
pub fn concat_features(
    a: &FeatureMatrix,
    a_manifest: &StoreManifest,
    b: &FeatureMatrix,
    b_manifest: &StoreManifest,
) -> Result<FeatureMatrix> {
    if a_manifest.image_ids != b_manifest.image_ids {
        let first = a_manifest
            .image_ids
            .iter()
            .zip(&b_manifest.image_ids)
            .position(|(x, y)| x != y)
            .unwrap_or(a_manifest.image_ids.len().min(b_manifest.image_ids.len()));
        return Err(Error::validation(
            "image_ids",
            format!("stores {} and {} differ in image order at position {first}", a_manifest.label(), b_manifest.label()),
        ));
    }
    if a.rows() != b.rows() || a.rows() != a_manifest.image_ids.len() {
        return Err(Error::Dimension {
            expected: a.rows(),
            found: b.rows(),
        });
    }
    let cols = a.cols() + b.cols();
    let mut data = Vec::with_capacity(a.rows() * cols);
    for i in 0..a.rows() {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    FeatureMatrix::new(a.rows(), cols, data)
}

fn id_index(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

/// A loaded store with an id → row lookup, the form consumed by the
/// estimators.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub matrix: FeatureMatrix,
    pub manifest: StoreManifest,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(matrix: FeatureMatrix, manifest: StoreManifest) -> Result<Self> {
        manifest.validate_against(&matrix)?;
        let index = manifest
            .image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            matrix,
            manifest,
            index,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let (matrix, manifest) = read_store(path)?;
        Self::new(matrix, manifest)
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Gathers the rows for `ids` as an `f64` matrix.
    pub fn rows_for<S: AsRef<str>>(&self, ids: &[S]) -> Result<DMatrix<f64>> {
        let cols = self.matrix.cols();
        let mut out = DMatrix::zeros(ids.len(), cols);
        for (k, id) in ids.iter().enumerate() {
            let id = id.as_ref();
            let &row = self
                .index
                .get(id)
                .ok_or_else(|| Error::UnknownImage(id.to_string()))?;
            for (j, &v) in self.matrix.row(row).iter().enumerate() {
                out[(k, j)] = f64::from(v);
            }
        }
        Ok(out)
    }

    /// Column-wise concatenation with another store over the same images.
    pub fn concat(&self, other: &FeatureStore) -> Result<FeatureStore> {
        let matrix = concat_features(&self.matrix, &self.manifest, &other.matrix, &other.manifest)?;
        let mut manifest = self.manifest.clone();
        manifest.model_id = format!("{}+{}", self.manifest.label(), other.manifest.label());
        Self::new(matrix, manifest)
    }
}
