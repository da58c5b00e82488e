//! Concept-balanced selection from a caption-embedding pool.
//!
//! Concepts are summarized by image prototypes (normalized mean of a few
//! image embeddings). A concept's rarity is the mean cosine of its `top_k`
//! closest pool rows; collection visits concepts from rarest to most common
//! and lets each claim its `quota` nearest rows that no earlier concept took.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingSet;
use crate::matrix::{dot, norm};

pub const DEFAULT_SUPPORT_CAP: usize = 128;
pub const DEFAULT_TOP_K: usize = 25_000;
pub const DEFAULT_QUOTA: usize = 2_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurationError {
    #[error("concept {0:?} has no embeddings")]
    EmptyConcept(String),
    #[error("concept {0:?} averages to a zero vector")]
    DegeneratePrototype(String),
    #[error("pool is empty")]
    EmptyPool,
    #[error("pool rows must be L2-normalized")]
    PoolNotNormalized,
    #[error("no prototypes given")]
    NoPrototypes,
    #[error("prototype {concept:?} has dim {got}, pool has {want}")]
    DimensionMismatch {
        concept: String,
        got: usize,
        want: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPrototype {
    pub concept_id: String,
    pub vector: Vec<f64>,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarityScore {
    pub concept_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationResult {
    /// `(concept_id, pool rows)` in processing order; rows by descending cosine.
    pub assignments: Vec<(String, Vec<usize>)>,
    pub quota: usize,
    pub selected_total: usize,
}

/// Normalized mean of the first `min(cap, count)` rows of each concept.
pub fn build_prototypes(
    few_shot: &BTreeMap<String, EmbeddingSet>,
    cap: usize,
) -> Result<Vec<ConceptPrototype>, CurationError> {
    few_shot
        .iter()
        .map(|(id, set)| {
            let take = set.count().min(cap);
            if take == 0 {
                return Err(CurationError::EmptyConcept(id.clone()));
            }
            let mut mean = vec![0.0; set.dim()];
            for row in set.rows().take(take) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += f64::from(v);
                }
            }
            for m in &mut mean {
                *m /= take as f64;
            }
            let n = norm(&mean);
            if n < 1e-12 {
                return Err(CurationError::DegeneratePrototype(id.clone()));
            }
            for m in &mut mean {
                *m /= n;
            }
            Ok(ConceptPrototype {
                concept_id: id.clone(),
                vector: mean,
                support: take,
            })
        })
        .collect()
}

fn check_pool(prototypes: &[ConceptPrototype], pool: &EmbeddingSet) -> Result<(), CurationError> {
    if pool.count() == 0 {
        return Err(CurationError::EmptyPool);
    }
    if !pool.is_normalized() {
        return Err(CurationError::PoolNotNormalized);
    }
    for p in prototypes {
        if p.vector.len() != pool.dim() {
            return Err(CurationError::DimensionMismatch {
                concept: p.concept_id.clone(),
                got: p.vector.len(),
                want: pool.dim(),
            });
        }
    }
    Ok(())
}

/// Cosine of every pool row against a unit prototype.
pub fn pool_cosines(prototype: &[f64], pool: &EmbeddingSet) -> Vec<f64> {
    let mut row64 = vec![0.0; pool.dim()];
    pool.rows()
        .map(|r| {
            for (d, &s) in row64.iter_mut().zip(r) {
                *d = f64::from(s);
            }
            dot(prototype, &row64)
        })
        .collect()
}

// Descending score, ascending index.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// The `k` best `(score, index)` candidates, sorted by [`rank_order`].
fn top_k(mut cands: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if k == 0 {
        return Vec::new();
    }
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, rank_order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(rank_order);
    cands
}

pub fn concept_rarity(
    prototypes: &[ConceptPrototype],
    pool: &EmbeddingSet,
    top_k_count: usize,
) -> Result<Vec<RarityScore>, CurationError> {
    check_pool(prototypes, pool)?;
    let k = top_k_count.min(pool.count()).max(1);
    Ok(prototypes
        .iter()
        .map(|p| {
            let cos = pool_cosines(&p.vector, pool);
            let best = top_k(
                cos.into_iter().enumerate().map(|(i, c)| (c, i)).collect(),
                k,
            );
            RarityScore {
                concept_id: p.concept_id.clone(),
                score: best.iter().map(|c| c.0).sum::<f64>() / k as f64,
            }
        })
        .collect())
}

/// Rarest-first, without-replacement collection of `quota` rows per concept.
pub fn collect_balanced(
    prototypes: &[ConceptPrototype],
    pool: &EmbeddingSet,
    quota: usize,
    top_k_count: usize,
) -> Result<CurationResult, CurationError> {
    if prototypes.is_empty() {
        return Err(CurationError::NoPrototypes);
    }
    let rarity = concept_rarity(prototypes, pool, top_k_count)?;
    let mut order: Vec<usize> = (0..prototypes.len()).collect();
    order.sort_by(|&a, &b| {
        rarity[a]
            .score
            .partial_cmp(&rarity[b].score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| prototypes[a].concept_id.cmp(&prototypes[b].concept_id))
    });

    let mut claimed = vec![false; pool.count()];
    let mut assignments = Vec::with_capacity(prototypes.len());
    let mut selected_total = 0;
    for ci in order {
        let p = &prototypes[ci];
        let cands: Vec<(f64, usize)> = pool_cosines(&p.vector, pool)
            .into_iter()
            .enumerate()
            .filter(|&(i, _)| !claimed[i])
            .map(|(i, c)| (c, i))
            .collect();
        let rows: Vec<usize> = top_k(cands, quota).into_iter().map(|(_, i)| i).collect();
        for &i in &rows {
            claimed[i] = true;
        }
        selected_total += rows.len();
        assignments.push((p.concept_id.clone(), rows));
    }
    Ok(CurationResult {
        assignments,
        quota,
        selected_total,
    })
}
