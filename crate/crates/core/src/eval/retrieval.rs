use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::embedding::PairedCorpus;
use crate::matrix::Matrix;
use crate::projector::{ProjectorStack, TokenBundle};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n: usize,
    /// Image query, text candidates.
    pub i2t: BTreeMap<usize, f64>,
    /// Text query, image candidates.
    pub t2i: BTreeMap<usize, f64>,
}

/// Zero-based rank of the true partner among `scores`, with ties going to
/// the lower index.
pub fn partner_rank(scores: impl Iterator<Item = f64> + Clone, partner: usize) -> usize {
    let target = scores.clone().nth(partner).expect("partner in range");
    scores
        .enumerate()
        .filter(|&(j, s)| s > target || (s == target && j < partner))
        .count()
}

/// Recall@k from an `n×n` similarity matrix whose diagonal holds the true pairs.
pub fn recall_from_similarity(sim: &Matrix, ks: &[usize]) -> RetrievalReport {
    let n = sim.rows();
    assert_eq!(n, sim.cols(), "similarity matrix must be square");
    let i2t: Vec<usize> = (0..n)
        .map(|i| partner_rank(sim.row(i).iter().copied(), i))
        .collect();
    let t2i: Vec<usize> = (0..n)
        .map(|j| partner_rank((0..n).map(|i| sim[(i, j)]), j))
        .collect();
    let recall = |ranks: &[usize]| -> BTreeMap<usize, f64> {
        ks.iter()
            .map(|&k| {
                let hits = ranks.iter().filter(|&&r| r < k).count();
                (k, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
            })
            .collect()
    };
    RetrievalReport {
        n,
        i2t: recall(&i2t),
        t2i: recall(&t2i),
    }
}

fn projected(
    bundles: &[TokenBundle],
    f: impl Fn(&TokenBundle) -> Result<Vec<f64>, EvalError>,
) -> Result<Matrix, EvalError> {
    let rows: Result<Vec<Vec<f64>>, _> = bundles.iter().map(f).collect();
    let rows = rows?;
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(Matrix::from_rows(&refs))
}

/// Retrieval over paired bundles; row `i` of each side is a true pair.
pub fn retrieval_recall_bundles(
    vision: &[TokenBundle],
    text: &[TokenBundle],
    stack: &ProjectorStack,
    ks: &[usize],
) -> Result<RetrievalReport, EvalError> {
    if vision.len() != text.len() {
        return Err(EvalError::LengthMismatch {
            what: "text bundles",
            expected: vision.len(),
            actual: text.len(),
        });
    }
    if vision.is_empty() {
        return Ok(recall_from_similarity(&Matrix::zeros(0, 0), ks));
    }
    let v = projected(vision, |b| Ok(stack.project_vision(b)?))?;
    let t = projected(text, |b| Ok(stack.project_text(b)?))?;
    Ok(recall_from_similarity(&v.matmul_t(&t), ks))
}

/// Retrieval over a pooled corpus: image rows as CLS tokens, text rows as
/// single tokens.
pub fn retrieval_recall(
    corpus: &PairedCorpus,
    stack: &ProjectorStack,
    ks: &[usize],
) -> Result<RetrievalReport, EvalError> {
    let to_f64 = |r: &[f32]| r.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
    let vision: Vec<TokenBundle> = corpus
        .image_set()
        .rows()
        .map(|r| TokenBundle::pooled_vision(&to_f64(r)))
        .collect();
    let text: Vec<TokenBundle> = corpus
        .text_set()
        .rows()
        .map(|r| TokenBundle::pooled_text(&to_f64(r)))
        .collect();
    retrieval_recall_bundles(&vision, &text, stack, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_similarity_is_perfect() {
        let r = recall_from_similarity(&Matrix::identity(4), &DEFAULT_KS);
        assert!(r.i2t.values().chain(r.t2i.values()).all(|&v| v == 1.0));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let sim = Matrix::filled(3, 3, 0.5);
        let r = recall_from_similarity(&sim, &[1, 2, 3]);
        // Only item 0 wins its tie at k = 1.
        assert!((r.i2t[&1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.i2t[&2] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.i2t[&3], 1.0);
        assert_eq!(r.i2t, r.t2i);
    }

    #[test]
    fn hand_ranked_three_by_three() {
        let sim = Matrix::from_rows(&[&[0.9, 0.1, 0.3], &[0.8, 0.2, 0.1], &[0.0, 0.5, 0.4]]);
        let r = recall_from_similarity(&sim, &[1, 2, 3]);
        // i2t ranks: 0 -> 0, 1 -> 1 (0.8 beats 0.2), 2 -> 1 (0.5 beats 0.4)
        assert!((r.i2t[&1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.i2t[&2], 1.0);
        // t2i ranks: col0 -> 0, col1 -> 1 (0.5), col2 -> 0 (0.4 best)
        assert!((r.t2i[&1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.t2i[&2], 1.0);
    }
}
