//! Embedding sets, manifests, and paired corpora.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

/// Maximum deviation of a row norm from 1 for sets flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Row norms below this are treated as zero.
pub const ZERO_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("data length {len} does not match count {count} x dim {dim}")]
    LengthMismatch {
        count: usize,
        dim: usize,
        len: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("row {row} flagged normalized but has norm {norm}")]
    NotNormalized { row: usize, norm: f64 },
    #[error("manifest has {entries} entries for {count} rows")]
    ManifestLength { entries: usize, count: usize },
    #[error("item id {0:?} is missing")]
    MissingId(String),
    #[error("item id {0:?} appears more than once")]
    DuplicateId(String),
    #[error("sets disagree on {what}: {left} vs {right}")]
    ShapeMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
}

/// A `count × dim` matrix of `f32` embeddings, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    count: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingSet {
    /// Validates and wraps row-major data.
    pub fn new(
        count: usize,
        dim: usize,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        if data.len() != count * dim {
            return Err(EmbeddingError::LengthMismatch {
                count,
                dim,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let set = Self {
            count,
            dim,
            data,
            normalized,
        };
        if normalized {
            for i in 0..count {
                let n = set.row_norm(i);
                if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(EmbeddingError::NotNormalized { row: i, norm: n });
                }
            }
        }
        Ok(set)
    }

    /// Builds a set from `f64` rows, rounding to `f32`.
    pub fn from_matrix(m: &Matrix, normalized: bool) -> Result<Self, EmbeddingError> {
        Self::new(
            m.rows(),
            m.cols(),
            m.as_slice().iter().map(|&v| v as f32).collect(),
            normalized,
        )
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        libm::sqrt(crate::matrix::dot_f32(self.row(i), self.row(i)))
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_f32(self.count, self.dim, &self.data)
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> EmbeddingSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingSet {
            count: indices.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        }
    }

    /// Divides every row by its L2 norm and sets the normalized flag.
    pub fn l2_normalize_rows(&self) -> Result<EmbeddingSet, EmbeddingError> {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.count {
            let n = self.row_norm(i);
            if n < ZERO_ROW_NORM {
                return Err(EmbeddingError::ZeroRow(i));
            }
            data.extend(self.row(i).iter().map(|&v| (f64::from(v) / n) as f32));
        }
        Ok(EmbeddingSet {
            count: self.count,
            dim: self.dim,
            data,
            normalized: true,
        })
    }
}

/// One manifest line. `tokens` records how many local-token rows belong to
/// the item when the paired EMBF file stores a flattened token grid.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<u32>,
}

impl ManifestEntry {
    pub fn new(item_id: impl Into<String>) -> Self {
        Self {
            item_id: item_id.into(),
            ..Self::default()
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, EmbeddingError> {
        let m = Self { entries };
        m.check_unique()?;
        Ok(m)
    }

    /// Manifest with ids `"0"`, `"1"`, ... for `count` rows.
    pub fn sequential(count: usize) -> Self {
        Self {
            entries: (0..count)
                .map(|i| ManifestEntry::new(alloc::format!("{i}")))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.item_id.as_str())
    }

    /// Id → row index; fails on the first duplicate id.
    pub fn check_unique(&self) -> Result<BTreeMap<&str, usize>, EmbeddingError> {
        let mut index = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if index.insert(e.item_id.as_str(), i).is_some() {
                return Err(EmbeddingError::DuplicateId(e.item_id.clone()));
            }
        }
        Ok(index)
    }

    pub fn check_matches(&self, set: &EmbeddingSet) -> Result<(), EmbeddingError> {
        if self.entries.len() != set.count() {
            return Err(EmbeddingError::ManifestLength {
                entries: self.entries.len(),
                count: set.count(),
            });
        }
        Ok(())
    }
}

/// Image and text embeddings of the same items, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedCorpus {
    image_set: EmbeddingSet,
    text_set: EmbeddingSet,
    manifest: Manifest,
}

impl PairedCorpus {
    pub fn new(
        image_set: EmbeddingSet,
        text_set: EmbeddingSet,
        manifest: Manifest,
    ) -> Result<Self, EmbeddingError> {
        if image_set.count() != text_set.count() {
            return Err(EmbeddingError::ShapeMismatch {
                what: "count",
                left: image_set.count(),
                right: text_set.count(),
            });
        }
        manifest.check_matches(&image_set)?;
        manifest.check_unique()?;
        Ok(Self {
            image_set,
            text_set,
            manifest,
        })
    }

    pub fn image_set(&self) -> &EmbeddingSet {
        &self.image_set
    }

    pub fn text_set(&self) -> &EmbeddingSet {
        &self.text_set
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.image_set.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reorders `b` so its rows follow the id order of `a`.
///
/// The joint manifest keeps `a`'s entries and fills fields that `a` leaves
/// empty from the matching entry of `b`.
pub fn align_pairs(
    a: (&EmbeddingSet, &Manifest),
    b: (&EmbeddingSet, &Manifest),
) -> Result<PairedCorpus, EmbeddingError> {
    let (a_set, a_man) = a;
    let (b_set, b_man) = b;
    a_man.check_matches(a_set)?;
    b_man.check_matches(b_set)?;
    a_man.check_unique()?;
    let b_index = b_man.check_unique()?;

    let mut order = Vec::with_capacity(a_man.len());
    let mut entries = Vec::with_capacity(a_man.len());
    for entry in &a_man.entries {
        let j = *b_index
            .get(entry.item_id.as_str())
            .ok_or_else(|| EmbeddingError::MissingId(entry.item_id.clone()))?;
        order.push(j);
        let other = &b_man.entries[j];
        let mut joint = entry.clone();
        if joint.label.is_none() {
            joint.label.clone_from(&other.label);
        }
        if joint.text.is_none() {
            joint.text.clone_from(&other.text);
        }
        if joint.group.is_none() {
            joint.group.clone_from(&other.group);
        }
        entries.push(joint);
    }
    PairedCorpus::new(
        a_set.clone(),
        b_set.select_rows(&order),
        Manifest { entries },
    )
}
