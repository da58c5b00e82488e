//! Gram matrices, HSIC and centered kernel alignment.
//!
//! Two routes compute linear CKA: [`cka_gram`] builds and centers both Gram
//! matrices, [`linear_cka`] works on column-centered features through
//! `‖ŶᵀX̂‖²_F / (‖X̂ᵀX̂‖_F ‖ŶᵀŶ‖_F)`. They must agree; [`cka`] dispatches to
//! the feature route for linear kernels because it never forms an `n × n`
//! matrix.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingSet;
use crate::matrix::Matrix;

/// Self-HSIC below this marks a constant (degenerate) embedding set.
pub const DEGENERATE_HSIC: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CkaError {
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("sample counts differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("embedding set is degenerate (self-HSIC {0:e})")]
    DegenerateSet(f64),
    #[error("invalid RBF bandwidth {0}")]
    InvalidBandwidth(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    Linear,
    /// `exp(-gamma ‖x − y‖²)`.
    Rbf {
        gamma: f64,
    },
    /// RBF with `gamma = 1 / (2 median²)` of each set's pairwise distances.
    RbfMedian,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Linear
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkaScore {
    pub value: f64,
    pub n: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median-heuristic bandwidth over all pairs `i < j`.
pub fn median_gamma(x: &Matrix) -> Result<f64, CkaError> {
    let n = x.rows();
    if n < 2 {
        return Err(CkaError::TooFewSamples { n, min: 2 });
    }
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(libm::sqrt(sq_dist(x.row(i), x.row(j))));
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    let gamma = 1.0 / (2.0 * median * median);
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(CkaError::InvalidBandwidth(gamma));
    }
    Ok(gamma)
}

/// `K_ij = k(x_i, x_j)` over the rows of `x`.
pub fn gram_matrix(x: &Matrix, kernel: KernelSpec) -> Result<Matrix, CkaError> {
    let n = x.rows();
    if n < 2 {
        return Err(CkaError::TooFewSamples { n, min: 2 });
    }
    match kernel {
        KernelSpec::Linear => Ok(x.matmul_t(x)),
        KernelSpec::Rbf { gamma } => {
            if !(gamma.is_finite() && gamma > 0.0) {
                return Err(CkaError::InvalidBandwidth(gamma));
            }
            let mut k = Matrix::zeros(n, n);
            for i in 0..n {
                k[(i, i)] = 1.0;
                for j in i + 1..n {
                    let v = libm::exp(-gamma * sq_dist(x.row(i), x.row(j)));
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            Ok(k)
        }
        KernelSpec::RbfMedian => gram_matrix(
            x,
            KernelSpec::Rbf {
                gamma: median_gamma(x)?,
            },
        ),
    }
}

pub fn compute_gram(set: &EmbeddingSet, kernel: KernelSpec) -> Result<Matrix, CkaError> {
    gram_matrix(&set.to_matrix(), kernel)
}

/// `H K H` with `H = I − 11ᵀ/n`.
pub fn center_gram(k: &Matrix) -> Matrix {
    let n = k.rows();
    assert_eq!(n, k.cols(), "Gram matrix must be square");
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / nf).collect();
    let col_means: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| k[(i, j)]).sum::<f64>() / nf)
        .collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = k[(i, j)] - row_means[i] - col_means[j] + grand;
        }
    }
    out
}

/// Biased HSIC estimate `trace(HKH · HLH) / (n − 1)²`.
pub fn hsic_biased(k: &Matrix, l: &Matrix) -> Result<f64, CkaError> {
    if k.shape() != l.shape() {
        return Err(CkaError::ShapeMismatch(k.rows(), l.rows()));
    }
    let n = k.rows();
    if n < 2 {
        return Err(CkaError::TooFewSamples { n, min: 2 });
    }
    let kc = center_gram(k);
    let lc = center_gram(l);
    Ok(hsic_centered(&kc, &lc))
}

// trace(A B) for symmetric A, B is the elementwise inner product.
fn hsic_centered(kc: &Matrix, lc: &Matrix) -> f64 {
    let n = kc.rows() as f64;
    let s: f64 = kc
        .as_slice()
        .iter()
        .zip(lc.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    s / ((n - 1.0) * (n - 1.0))
}

fn check_pair(x: &Matrix, y: &Matrix) -> Result<usize, CkaError> {
    if x.rows() != y.rows() {
        return Err(CkaError::ShapeMismatch(x.rows(), y.rows()));
    }
    let n = x.rows();
    if n < 3 {
        return Err(CkaError::TooFewSamples { n, min: 3 });
    }
    Ok(n)
}

/// CKA through explicit Gram matrices and HSIC; valid for every kernel.
pub fn cka_gram_matrices(x: &Matrix, y: &Matrix, kernel: KernelSpec) -> Result<CkaScore, CkaError> {
    let n = check_pair(x, y)?;
    let kc = center_gram(&gram_matrix(x, kernel)?);
    let lc = center_gram(&gram_matrix(y, kernel)?);
    let kk = hsic_centered(&kc, &kc);
    let ll = hsic_centered(&lc, &lc);
    for s in [kk, ll] {
        if s < DEGENERATE_HSIC {
            return Err(CkaError::DegenerateSet(s));
        }
    }
    let kl = hsic_centered(&kc, &lc);
    Ok(CkaScore {
        value: kl / libm::sqrt(kk * ll),
        n,
    })
}

/// Linear CKA on column-centered features.
pub fn linear_cka_matrices(x: &Matrix, y: &Matrix) -> Result<CkaScore, CkaError> {
    let n = check_pair(x, y)?;
    let xc = x.center_columns();
    let yc = y.center_columns();
    let scale = ((n - 1) * (n - 1)) as f64;
    let xx = xc.t_matmul(&xc).frobenius_sq();
    let yy = yc.t_matmul(&yc).frobenius_sq();
    for s in [xx / scale, yy / scale] {
        if s < DEGENERATE_HSIC {
            return Err(CkaError::DegenerateSet(s));
        }
    }
    let yx = yc.t_matmul(&xc).frobenius_sq();
    Ok(CkaScore {
        value: yx / (libm::sqrt(xx) * libm::sqrt(yy)),
        n,
    })
}

pub fn cka_matrices(x: &Matrix, y: &Matrix, kernel: KernelSpec) -> Result<CkaScore, CkaError> {
    match kernel {
        KernelSpec::Linear => linear_cka_matrices(x, y),
        _ => cka_gram_matrices(x, y, kernel),
    }
}

/// CKA between row-paired embedding sets.
pub fn cka(a: &EmbeddingSet, b: &EmbeddingSet, kernel: KernelSpec) -> Result<CkaScore, CkaError> {
    cka_matrices(&a.to_matrix(), &b.to_matrix(), kernel)
}

pub fn cka_gram(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    kernel: KernelSpec,
) -> Result<CkaScore, CkaError> {
    cka_gram_matrices(&a.to_matrix(), &b.to_matrix(), kernel)
}

pub fn linear_cka(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<CkaScore, CkaError> {
    linear_cka_matrices(&a.to_matrix(), &b.to_matrix())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub vision: String,
    pub text: String,
    pub cka: f64,
    pub n: usize,
}

/// Descending CKA, ties broken by `(vision, text)` names.
pub fn sort_pair_scores(scores: &mut [PairScore]) {
    scores.sort_by(|a, b| {
        b.cka
            .partial_cmp(&a.cka)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.vision.cmp(&b.vision))
            .then_with(|| a.text.cmp(&b.text))
    });
}

/// Scores every vision × text candidate and sorts the result.
pub fn rank_encoder_pairs(
    vision: &[(String, EmbeddingSet)],
    text: &[(String, EmbeddingSet)],
    kernel: KernelSpec,
) -> Result<Vec<PairScore>, CkaError> {
    let text_m: Vec<Matrix> = text.iter().map(|(_, s)| s.to_matrix()).collect();
    let mut out = Vec::with_capacity(vision.len() * text.len());
    for (vname, vset) in vision {
        let vm = vset.to_matrix();
        for ((tname, _), tm) in text.iter().zip(&text_m) {
            let s = cka_matrices(&vm, tm, kernel)?;
            out.push(PairScore {
                vision: vname.clone(),
                text: tname.clone(),
                cka: s.value,
                n: s.n,
            });
        }
    }
    sort_pair_scores(&mut out);
    Ok(out)
}
