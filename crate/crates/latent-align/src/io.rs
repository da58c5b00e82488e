//! On-disk layouts.
//!
//! * `name.embf` holds one embedding per row; `name.jsonl` beside it is its
//!   manifest (optional; sequential ids are assumed when absent).
//! * A token directory holds `locals.embf` (all items' local tokens stacked,
//!   with per-item counts in the manifest's `tokens` field), an optional
//!   `cls.embf` with one row per item, and `manifest.jsonl`.
//! * A pairs directory holds `vision.embf`, `text.embf` and a shared
//!   `manifest.jsonl`, or per-side `vision.jsonl` / `text.jsonl` that are
//!   aligned by `item_id`.
//! * A segmentation directory is a token directory plus `masks.jsonl`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use latent_align_core::embedding::{align_pairs, EmbeddingError};
use latent_align_core::embf::{self, EmbfError};
use latent_align_core::eval::SegInput;
use latent_align_core::projector::{ProjectorError, TokenBundle};
use latent_align_core::{EmbeddingSet, Manifest, ManifestEntry, Matrix, PairedCorpus};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOCALS_FILE: &str = "locals.embf";
pub const CLS_FILE: &str = "cls.embf";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MASKS_FILE: &str = "masks.jsonl";
pub const VISION_FILE: &str = "vision.embf";
pub const TEXT_FILE: &str = "text.embf";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Embf { path: PathBuf, source: EmbfError },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Embedding {
        path: PathBuf,
        source: EmbeddingError,
    },
    #[error("{path}: {message}")]
    Layout { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Bundle {
        path: PathBuf,
        source: ProjectorError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn layout(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Layout {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_embf(path: &Path) -> Result<EmbeddingSet, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    embf::decode(&bytes).map_err(|source| IoError::Embf {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_embf(path: &Path, set: &EmbeddingSet) -> Result<(), IoError> {
    fs::write(path, embf::encode(set)).map_err(io_err(path))
}

/// Reads JSON-lines, one value per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable record");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, IoError> {
    let entries: Vec<ManifestEntry> = read_jsonl(path)?;
    Manifest::new(entries).map_err(|source| IoError::Embedding {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), IoError> {
    write_jsonl(path, &manifest.entries)
}

/// `x.embf` → `x.jsonl`.
pub fn sidecar_manifest_path(embf_path: &Path) -> PathBuf {
    embf_path.with_extension("jsonl")
}

/// An EMBF file with its sidecar manifest, or sequential ids if there is none.
pub fn read_embedding(path: &Path) -> Result<(EmbeddingSet, Manifest), IoError> {
    let set = read_embf(path)?;
    let mpath = sidecar_manifest_path(path);
    let manifest = if mpath.exists() {
        read_manifest(&mpath)?
    } else {
        Manifest::sequential(set.count())
    };
    manifest
        .check_matches(&set)
        .map_err(|source| IoError::Embedding {
            path: mpath,
            source,
        })?;
    Ok((set, manifest))
}

pub fn write_embedding(
    path: &Path,
    set: &EmbeddingSet,
    manifest: &Manifest,
) -> Result<(), IoError> {
    write_embf(path, set)?;
    write_manifest(&sidecar_manifest_path(path), manifest)
}

pub fn read_pairs_dir(dir: &Path) -> Result<PairedCorpus, IoError> {
    let vpath = dir.join(VISION_FILE);
    let tpath = dir.join(TEXT_FILE);
    let shared = dir.join(MANIFEST_FILE);
    let embedding_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IoError::Embedding { path, source }
    };
    if shared.exists() {
        let manifest = read_manifest(&shared)?;
        let v = read_embf(&vpath)?;
        let t = read_embf(&tpath)?;
        return PairedCorpus::new(v, t, manifest).map_err(embedding_err(dir));
    }
    let (v, vm) = read_embedding(&vpath)?;
    let (t, tm) = read_embedding(&tpath)?;
    align_pairs((&v, &vm), (&t, &tm)).map_err(embedding_err(dir))
}

pub fn write_pairs_dir(dir: &Path, corpus: &PairedCorpus) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_embf(&dir.join(VISION_FILE), corpus.image_set())?;
    write_embf(&dir.join(TEXT_FILE), corpus.text_set())?;
    write_manifest(&dir.join(MANIFEST_FILE), corpus.manifest())
}

/// Rows of `set` (described by `manifest`) in the id order of `reference`.
pub fn reorder_rows(
    set: &EmbeddingSet,
    manifest: &Manifest,
    reference: &Manifest,
) -> Result<EmbeddingSet, EmbeddingError> {
    let index = manifest.check_unique()?;
    let order = reference
        .ids()
        .map(|id| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| EmbeddingError::MissingId(id.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(set.select_rows(&order))
}

/// Which modality a pooled file feeds; pooled vision rows become CLS
/// tokens, pooled text rows become single local tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Vision,
    Text,
}

/// Bundles with the manifest describing them, row-aligned.
#[derive(Debug, Clone)]
pub struct BundleSet {
    pub bundles: Vec<TokenBundle>,
    pub manifest: Manifest,
}

impl BundleSet {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.bundles.first().map(TokenBundle::dim)
    }

    /// Reorders `self` to follow the item ids of `reference`.
    pub fn aligned_to(self, reference: &Manifest) -> Result<BundleSet, EmbeddingError> {
        let index = self.manifest.check_unique()?;
        let order: Vec<usize> = reference
            .ids()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| EmbeddingError::MissingId(id.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let mut slots: Vec<Option<TokenBundle>> = self.bundles.into_iter().map(Some).collect();
        let bundles = order
            .iter()
            .map(|&i| slots[i].take().expect("unique ids"))
            .collect();
        let entries = order
            .iter()
            .map(|&i| self.manifest.entries[i].clone())
            .collect();
        Ok(BundleSet {
            bundles,
            manifest: Manifest { entries },
        })
    }
}

fn row_matrix(set: &EmbeddingSet, i: usize) -> Matrix {
    Matrix::from_f32(1, set.dim(), set.row(i))
}

pub fn pooled_bundles(set: &EmbeddingSet, side: Side) -> Vec<TokenBundle> {
    (0..set.count())
        .map(|i| {
            let v: Vec<f64> = set.row(i).iter().map(|&x| f64::from(x)).collect();
            match side {
                Side::Vision => TokenBundle::pooled_vision(&v),
                Side::Text => TokenBundle::pooled_text(&v),
            }
        })
        .collect()
}

pub fn read_token_dir(dir: &Path) -> Result<BundleSet, IoError> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let lpath = dir.join(LOCALS_FILE);
    let cpath = dir.join(CLS_FILE);
    let locals = lpath.exists().then(|| read_embf(&lpath)).transpose()?;
    let cls = cpath.exists().then(|| read_embf(&cpath)).transpose()?;
    if locals.is_none() && cls.is_none() {
        return Err(layout(
            dir,
            format!("neither {LOCALS_FILE} nor {CLS_FILE} present"),
        ));
    }
    if let Some(c) = &cls {
        manifest
            .check_matches(c)
            .map_err(|source| IoError::Embedding {
                path: cpath.clone(),
                source,
            })?;
    }
    let dim = locals
        .as_ref()
        .or(cls.as_ref())
        .map(EmbeddingSet::dim)
        .unwrap_or(0);
    if let (Some(l), Some(c)) = (&locals, &cls) {
        if l.count() > 0 && l.dim() != c.dim() {
            return Err(layout(
                dir,
                format!("locals dim {} differs from cls dim {}", l.dim(), c.dim()),
            ));
        }
    }

    let mut bundles = Vec::with_capacity(manifest.len());
    let mut offset = 0usize;
    for (i, entry) in manifest.entries.iter().enumerate() {
        let t = match (&locals, entry.tokens) {
            (Some(_), Some(t)) => t as usize,
            (Some(_), None) => {
                return Err(layout(
                    dir,
                    format!("entry {:?} lacks a token count", entry.item_id),
                ));
            }
            (None, _) => 0,
        };
        let local = match &locals {
            Some(l) => {
                if offset + t > l.count() {
                    return Err(layout(
                        &lpath,
                        format!("token counts exceed {} rows", l.count()),
                    ));
                }
                let data = &l.data()[offset * dim..(offset + t) * dim];
                offset += t;
                Matrix::from_f32(t, dim, data)
            }
            None => Matrix::zeros(0, dim),
        };
        let c = cls.as_ref().map(|c| row_matrix(c, i));
        bundles.push(
            TokenBundle::new(local, c).map_err(|source| IoError::Bundle {
                path: dir.to_path_buf(),
                source,
            })?,
        );
    }
    if let Some(l) = &locals {
        if offset != l.count() {
            return Err(layout(
                &lpath,
                format!("token counts cover {offset} of {} rows", l.count()),
            ));
        }
    }
    Ok(BundleSet { bundles, manifest })
}

/// Writes bundles in the token-directory layout; the manifest's `tokens`
/// fields are overwritten with the actual counts.
pub fn write_token_dir(dir: &Path, set: &BundleSet) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let dim = set
        .dim()
        .ok_or_else(|| layout(dir, "no bundles to write"))?;
    let mut manifest = set.manifest.clone();
    let mut locals = Vec::new();
    for (b, e) in set.bundles.iter().zip(&mut manifest.entries) {
        e.tokens = Some(b.token_count() as u32);
        locals.extend(b.locals().as_slice().iter().map(|&x| x as f32));
    }
    let total: usize = set.bundles.iter().map(TokenBundle::token_count).sum();
    let to_set = |count, data| {
        EmbeddingSet::new(count, dim, data, false).map_err(|source| IoError::Embedding {
            path: dir.to_path_buf(),
            source,
        })
    };
    if total > 0 {
        write_embf(&dir.join(LOCALS_FILE), &to_set(total, locals)?)?;
    }
    let with_cls = set.bundles.iter().filter(|b| b.cls().is_some()).count();
    if with_cls == set.len() {
        let cls: Vec<f32> = set
            .bundles
            .iter()
            .flat_map(|b| {
                b.cls()
                    .expect("checked")
                    .as_slice()
                    .iter()
                    .map(|&x| x as f32)
            })
            .collect();
        write_embf(&dir.join(CLS_FILE), &to_set(set.len(), cls)?)?;
    } else if with_cls > 0 {
        return Err(layout(
            dir,
            "either every bundle or none must carry a CLS token",
        ));
    }
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)
}

/// A token directory, or an `.embf` file read as pooled embeddings for `side`.
pub fn read_bundles(path: &Path, side: Side) -> Result<BundleSet, IoError> {
    if path.is_dir() {
        return read_token_dir(path);
    }
    let (set, manifest) = read_embedding(path)?;
    Ok(BundleSet {
        bundles: pooled_bundles(&set, side),
        manifest,
    })
}

/// Ground truth for one image of a segmentation directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub item_id: String,
    /// Patch grid `[h, w]`.
    pub grid: [usize; 2],
    /// Target size `[H, W]`.
    pub size: [usize; 2],
    /// `H·W` class ids, row-major.
    pub gt: Vec<u32>,
}

/// One [`SegInput`] per image: local tokens are the patch grid, CLS is required.
pub fn read_seg_dir(dir: &Path) -> Result<Vec<(String, SegInput)>, IoError> {
    let tokens = read_token_dir(dir)?;
    let masks: Vec<MaskRecord> = read_jsonl(&dir.join(MASKS_FILE))?;
    let by_id: std::collections::HashMap<&str, &MaskRecord> =
        masks.iter().map(|m| (m.item_id.as_str(), m)).collect();
    tokens
        .bundles
        .iter()
        .zip(&tokens.manifest.entries)
        .map(|(b, e)| {
            let m = by_id
                .get(e.item_id.as_str())
                .ok_or_else(|| layout(dir, format!("no mask for {:?}", e.item_id)))?;
            let cls = b
                .cls()
                .ok_or_else(|| layout(dir, format!("{:?} has no CLS token", e.item_id)))?;
            Ok((
                e.item_id.clone(),
                SegInput {
                    patches: b.locals().clone(),
                    grid: (m.grid[0], m.grid[1]),
                    cls: cls.clone(),
                    gt: m.gt.clone(),
                    target: (m.size[0], m.size[1]),
                },
            ))
        })
        .collect()
}

pub fn write_seg_dir(dir: &Path, items: &[(String, SegInput)]) -> Result<(), IoError> {
    let bundles = items
        .iter()
        .map(|(_, s)| TokenBundle::new(s.patches.clone(), Some(s.cls.clone())))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| IoError::Bundle {
            path: dir.to_path_buf(),
            source,
        })?;
    let manifest = Manifest {
        entries: items
            .iter()
            .map(|(id, _)| ManifestEntry::new(id.clone()))
            .collect(),
    };
    write_token_dir(dir, &BundleSet { bundles, manifest })?;
    let masks: Vec<MaskRecord> = items
        .iter()
        .map(|(id, s)| MaskRecord {
            item_id: id.clone(),
            grid: [s.grid.0, s.grid.1],
            size: [s.target.0, s.target.1],
            gt: s.gt.clone(),
        })
        .collect();
    write_jsonl(&dir.join(MASKS_FILE), &masks)
}
