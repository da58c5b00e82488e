//! Toy worlds: two vector sets derived from one shared latent.
//!
//! Each instance draws `Z ~ U[-1, 1]^{n×d}`, pushes it through two
//! independently initialized ReLU MLPs and adds scaled uniform noise:
//! `A = T1(Z) + w1·U`, `B = T2(Z) + w2·V` with `U, V ~ U[0, 1)^{n×d}` and
//! `w1, w2 ~ U[0, 1)`. The sweep relates linear CKA of `(A, B)` to the
//! lowest CLIP loss a single linear map reaches.
//!
//! Every random draw of instance `i` comes from ChaCha8 streams keyed by
//! `(seed, i)`, so instances can be generated in any order or in parallel.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingSet;
use crate::kernels::{self, CkaError};
use crate::matrix::Matrix;
use crate::stats;
use crate::trainer::{self, LinearFitConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Cka(#[from] CkaError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n: usize,
    pub d: usize,
    pub hidden: usize,
    pub noise_seed: u64,
    pub weight_seed: u64,
    pub instances: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n: 32,
            d: 16,
            hidden: 256,
            noise_seed: 0,
            weight_seed: 1,
            instances: 1000,
        }
    }
}

impl WorldConfig {
    /// Defaults with both seeds derived from one value.
    pub fn seeded(seed: u64) -> Self {
        Self {
            noise_seed: seed,
            weight_seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.n < 2 {
            return Err(WorldError::InvalidConfig("n must be at least 2"));
        }
        if self.d < 1 {
            return Err(WorldError::InvalidConfig("d must be at least 1"));
        }
        if self.hidden < 4 * self.d {
            return Err(WorldError::InvalidConfig("hidden must be at least 4·d"));
        }
        Ok(())
    }
}

/// Seeded stream `instance` of the generator keyed by `seed`.
pub fn instance_rng(seed: u64, instance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance);
    rng
}

/// Matrix of `U[0, 1)` draws.
pub fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random::<f64>()).collect(),
    )
}

/// `relu(z·W1 + b1)·W2`, weights `U[−1/√fan_in, 1/√fan_in]`, no output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
}

impl RandomMlp {
    pub fn new(rng: &mut impl Rng, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let mut sym = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
                    .collect(),
            )
        };
        let w1 = sym(d_in, hidden, d_in);
        let b1 = sym(1, hidden, d_in).into_vec();
        let w2 = sym(hidden, d_out, hidden);
        Self { w1, b1, w2 }
    }

    pub fn apply(&self, z: &Matrix) -> Matrix {
        let mut h = z.matmul(&self.w1);
        for i in 0..h.rows() {
            for (v, b) in h.row_mut(i).iter_mut().zip(&self.b1) {
                *v = (*v + b).max(0.0);
            }
        }
        h.matmul(&self.w2)
    }
}

/// A latent space with two fixed non-linear views of it.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedLatentWorld {
    pub latent_dim: usize,
    pub t1: RandomMlp,
    pub t2: RandomMlp,
}

impl SharedLatentWorld {
    pub fn new(
        rng: &mut impl Rng,
        latent_dim: usize,
        hidden: usize,
        d_a: usize,
        d_b: usize,
    ) -> Self {
        let t1 = RandomMlp::new(rng, latent_dim, hidden, d_a);
        let t2 = RandomMlp::new(rng, latent_dim, hidden, d_b);
        Self { latent_dim, t1, t2 }
    }

    /// `Z = 2·U[0,1) − 1`.
    pub fn sample_latent(&self, rng: &mut impl Rng, n: usize) -> Matrix {
        rand_matrix(rng, n, self.latent_dim).map(|v| 2.0 * v - 1.0)
    }

    /// `(T1(Z) + w1·U, T2(Z) + w2·V)`.
    pub fn views(&self, z: &Matrix, rng: &mut impl Rng, w1: f64, w2: f64) -> (Matrix, Matrix) {
        let mut a = self.t1.apply(z);
        let mut b = self.t2.apply(z);
        let u = rand_matrix(rng, a.rows(), a.cols());
        let v = rand_matrix(rng, b.rows(), b.cols());
        for (x, n) in a.as_mut_slice().iter_mut().zip(u.as_slice()) {
            *x += w1 * n;
        }
        for (x, n) in b.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *x += w2 * n;
        }
        (a, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyInstance {
    pub a: EmbeddingSet,
    pub b: EmbeddingSet,
    pub w1: f64,
    pub w2: f64,
}

/// Noise weights override for [`sample_instance_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseWeights {
    pub w1: f64,
    pub w2: f64,
}

pub fn sample_instance(cfg: &WorldConfig, index: u64) -> ToyInstance {
    sample_instance_with(cfg, index, None)
}

/// Generates instance `index`; `noise` replaces the sampled `w1, w2` when given.
pub fn sample_instance_with(
    cfg: &WorldConfig,
    index: u64,
    noise: Option<NoiseWeights>,
) -> ToyInstance {
    let mut wrng = instance_rng(cfg.weight_seed, index);
    let world = SharedLatentWorld::new(&mut wrng, cfg.d, cfg.hidden, cfg.d, cfg.d);
    let mut nrng = instance_rng(cfg.noise_seed, index);
    let z = world.sample_latent(&mut nrng, cfg.n);
    let sampled = NoiseWeights {
        w1: nrng.random::<f64>(),
        w2: nrng.random::<f64>(),
    };
    let NoiseWeights { w1, w2 } = noise.unwrap_or(sampled);
    let (a, b) = world.views(&z, &mut nrng, w1, w2);
    ToyInstance {
        a: EmbeddingSet::from_matrix(&a, false).expect("finite toy data"),
        b: EmbeddingSet::from_matrix(&b, false).expect("finite toy data"),
        w1,
        w2,
    }
}

/// Fit settings for the sweep. The map starts at the identity so the
/// minimum loss depends on the pair of views, not on a random draw.
pub fn linear_fit_config() -> LinearFitConfig {
    LinearFitConfig::default()
}

/// Lowest symmetric CLIP loss (temperature 0.07) a linear map `A·W` reaches
/// against `B` in 500 full-batch SGD steps at learning rate 0.01.
pub fn min_clip_loss_linear(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    fit: &LinearFitConfig,
) -> Result<trainer::LinearFit, WorldError> {
    Ok(trainer::fit_linear_map(
        &a.to_matrix(),
        &b.to_matrix(),
        fit,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub instance: u64,
    pub cka: f64,
    pub min_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// `None` when undefined (fewer than two rows or a constant column).
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

impl SweepResult {
    pub fn from_rows(rows: Vec<SweepRow>) -> Self {
        let cka: Vec<f64> = rows.iter().map(|r| r.cka).collect();
        let loss: Vec<f64> = rows.iter().map(|r| r.min_loss).collect();
        Self {
            pearson: stats::pearson(&cka, &loss),
            spearman: stats::spearman(&cka, &loss),
            rows,
        }
    }

    /// Mean `min_loss` per CKA decile, lowest CKA first.
    pub fn decile_means(&self) -> Vec<f64> {
        let cka: Vec<f64> = self.rows.iter().map(|r| r.cka).collect();
        let loss: Vec<f64> = self.rows.iter().map(|r| r.min_loss).collect();
        stats::binned_means(&cka, &loss, 10)
    }

    /// Number of decile steps where mean loss rises.
    pub fn decile_inversions(&self) -> usize {
        stats::count_increases(&self.decile_means())
    }
}

/// CKA and minimum linear-map loss of one instance.
pub fn sweep_row(cfg: &WorldConfig, index: u64) -> Result<SweepRow, WorldError> {
    let inst = sample_instance(cfg, index);
    let cka = kernels::linear_cka(&inst.a, &inst.b)?;
    let fit = min_clip_loss_linear(&inst.a, &inst.b, &linear_fit_config())?;
    Ok(SweepRow {
        instance: index,
        cka: cka.value,
        min_loss: fit.min_loss,
        final_loss: fit.final_loss,
    })
}

pub fn run_sweep(cfg: &WorldConfig) -> Result<SweepResult, WorldError> {
    cfg.validate()?;
    let rows = (0..cfg.instances as u64)
        .map(|i| sweep_row(cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepResult::from_rows(rows))
}

/// Paired views of one shared latent, for projector-training fixtures.
pub struct SharedLatentCorpus {
    pub world: SharedLatentWorld,
    pub noise: NoiseWeights,
}

impl SharedLatentCorpus {
    pub fn new(
        seed: u64,
        latent_dim: usize,
        hidden: usize,
        d_vision: usize,
        d_text: usize,
        noise: NoiseWeights,
    ) -> Self {
        let mut rng = instance_rng(seed, 0);
        Self {
            world: SharedLatentWorld::new(&mut rng, latent_dim, hidden, d_vision, d_text),
            noise,
        }
    }

    /// `n` fresh pairs from sample stream `split`.
    pub fn sample(&self, seed: u64, split: u64, n: usize) -> (Matrix, Matrix) {
        let mut rng = instance_rng(seed ^ 0xC0_4905, split);
        let z = self.world.sample_latent(&mut rng, n);
        self.world.views(&z, &mut rng, self.noise.w1, self.noise.w2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_is_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(sample_instance(&cfg, 3), sample_instance(&cfg, 3));
        assert_ne!(sample_instance(&cfg, 3), sample_instance(&cfg, 4));
    }

    #[test]
    fn default_shapes_finite() {
        let cfg = WorldConfig::default();
        let inst = sample_instance(&cfg, 0);
        assert_eq!((inst.a.count(), inst.a.dim()), (32, 16));
        assert_eq!((inst.b.count(), inst.b.dim()), (32, 16));
        assert!(inst
            .a
            .data()
            .iter()
            .chain(inst.b.data())
            .all(|v| v.is_finite()));
        assert!((0.0..1.0).contains(&inst.w1) && (0.0..1.0).contains(&inst.w2));
    }

    #[test]
    fn noiseless_views_are_pure_transforms() {
        let cfg = WorldConfig::default();
        let inst = sample_instance_with(&cfg, 5, Some(NoiseWeights { w1: 0.0, w2: 0.0 }));
        let mut wrng = instance_rng(cfg.weight_seed, 5);
        let world = SharedLatentWorld::new(&mut wrng, cfg.d, cfg.hidden, cfg.d, cfg.d);
        let mut nrng = instance_rng(cfg.noise_seed, 5);
        let z = world.sample_latent(&mut nrng, cfg.n);
        let a = EmbeddingSet::from_matrix(&world.t1.apply(&z), false).unwrap();
        let b = EmbeddingSet::from_matrix(&world.t2.apply(&z), false).unwrap();
        assert_eq!(inst.a, a);
        assert_eq!(inst.b, b);
    }

    #[test]
    fn config_validation() {
        let bad = WorldConfig {
            hidden: 10,
            ..WorldConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = WorldConfig {
            n: 1,
            ..WorldConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_instance_correlations_undefined() {
        let cfg = WorldConfig {
            instances: 1,
            ..WorldConfig::default()
        };
        let r = run_sweep(&cfg).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.pearson, None);
        assert_eq!(r.spearman, None);
    }
}
