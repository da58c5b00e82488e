use std::collections::{BTreeMap, HashSet};

use latent_align_core::curation::{
    build_prototypes, collect_balanced, concept_rarity, ConceptPrototype,
};
use latent_align_core::embedding::EmbeddingSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Trial {
    prototypes: Vec<ConceptPrototype>,
    pool: EmbeddingSet,
    quota: usize,
    top_k: usize,
}

fn random_set(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    center: &[f32],
    spread: f32,
) -> EmbeddingSet {
    let data = (0..count * dim)
        .map(|i| center[i % dim] + spread * rng.random_range(-1.0f32..1.0))
        .collect();
    EmbeddingSet::new(count, dim, data, false).unwrap()
}

fn trial(seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..17);
    let concepts = rng.random_range(1..=10);
    let rows = rng.random_range(1..=5000);
    // A few clusters of uneven size so some concepts are genuinely rarer.
    let mut pool_rows: Vec<f32> = Vec::with_capacity(rows * dim);
    let centers: Vec<Vec<f32>> = (0..concepts)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    for _ in 0..rows {
        let c = &centers[(rng.random::<f64>().powi(2) * concepts as f64) as usize];
        pool_rows.extend(c.iter().map(|&v| v + 0.6 * rng.random_range(-1.0f32..1.0)));
    }
    let pool = EmbeddingSet::new(rows, dim, pool_rows, false)
        .unwrap()
        .l2_normalize_rows()
        .unwrap();
    let mut few_shot = BTreeMap::new();
    for (i, c) in centers.iter().enumerate() {
        let count = rng.random_range(1..20);
        few_shot.insert(
            format!("concept-{i:02}"),
            random_set(&mut rng, count, dim, c, 0.3),
        );
    }
    Trial {
        prototypes: build_prototypes(&few_shot, 128).unwrap(),
        pool,
        quota: rng.random_range(1..=100),
        top_k: rng.random_range(1..=2 * rows),
    }
}

fn cosines(p: &ConceptPrototype, pool: &EmbeddingSet) -> Vec<f64> {
    pool.rows()
        .map(|r| p.vector.iter().zip(r).map(|(a, &b)| a * f64::from(b)).sum())
        .collect()
}

/// Every candidate sorted: higher cosine first, lower row index on ties.
fn full_sort(cos: &[f64], skip: &HashSet<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cos.len()).filter(|i| !skip.contains(i)).collect();
    idx.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]).then(a.cmp(&b)));
    idx
}

fn oracle_rarity(t: &Trial) -> Vec<f64> {
    let k = t.top_k.min(t.pool.count());
    t.prototypes
        .iter()
        .map(|p| {
            let cos = cosines(p, &t.pool);
            full_sort(&cos, &HashSet::new())[..k]
                .iter()
                .map(|&i| cos[i])
                .sum::<f64>()
                / k as f64
        })
        .collect()
}

fn oracle_assignments(t: &Trial) -> Vec<(String, Vec<usize>)> {
    let rarity = oracle_rarity(t);
    let mut order: Vec<usize> = (0..t.prototypes.len()).collect();
    order.sort_by(|&a, &b| {
        rarity[a]
            .total_cmp(&rarity[b])
            .then_with(|| t.prototypes[a].concept_id.cmp(&t.prototypes[b].concept_id))
    });
    let mut taken = HashSet::new();
    let mut out = Vec::new();
    for ci in order {
        let p = &t.prototypes[ci];
        let cos = cosines(p, &t.pool);
        let rows: Vec<usize> = full_sort(&cos, &taken).into_iter().take(t.quota).collect();
        taken.extend(rows.iter().copied());
        out.push((p.concept_id.clone(), rows));
    }
    out
}

#[test]
fn matches_brute_force_on_200_trials() {
    for seed in 0..200 {
        let t = trial(seed);
        let got = collect_balanced(&t.prototypes, &t.pool, t.quota, t.top_k).unwrap();
        let want = oracle_assignments(&t);
        assert_eq!(got.assignments, want, "trial {seed}");

        let rar = concept_rarity(&t.prototypes, &t.pool, t.top_k).unwrap();
        for (r, o) in rar.iter().zip(oracle_rarity(&t)) {
            assert!(
                (r.score - o).abs() < 1e-7,
                "trial {seed}: {} vs {o}",
                r.score
            );
        }

        // Without replacement.
        let mut seen = HashSet::new();
        for (_, rows) in &got.assignments {
            for &r in rows {
                assert!(seen.insert(r), "trial {seed}: row {r} selected twice");
            }
        }
        assert_eq!(got.selected_total, seen.len());
        assert_eq!(
            got.selected_total,
            (t.quota * t.prototypes.len()).min(t.pool.count())
        );

        // Rarer concepts are served first.
        let score: BTreeMap<&str, f64> = rar
            .iter()
            .map(|r| (r.concept_id.as_str(), r.score))
            .collect();
        for w in got.assignments.windows(2) {
            assert!(score[w[0].0.as_str()] <= score[w[1].0.as_str()]);
        }
    }
}

#[test]
fn order_of_prototypes_is_irrelevant() {
    let t = trial(999);
    let mut rev = t.prototypes.clone();
    rev.reverse();
    let a = collect_balanced(&t.prototypes, &t.pool, t.quota, t.top_k).unwrap();
    let b = collect_balanced(&rev, &t.pool, t.quota, t.top_k).unwrap();
    assert_eq!(a, b);
}
