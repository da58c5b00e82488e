use std::collections::BTreeMap;

use latent_align_core::eval::{
    foreground_iou, recall_from_similarity, retrieval_recall_bundles, score_predictions,
    segment_zero_shot, zero_shot_classify, CandidateSet, ClassifierSpec, SegAccumulator,
    SegClasses, SegInput, SegOptions, Upsample,
};
use latent_align_core::matrix::Matrix;
use latent_align_core::projector::{
    init_stack, ProjectorStack, StackDims, StackLayout, TokenBundle,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn identity_stack(d: usize) -> ProjectorStack {
    init_stack(
        StackDims::new(d, d, d),
        StackLayout::all_identity(),
        false,
        0,
    )
    .unwrap()
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_vec(
        n,
        d,
        (0..n * d)
            .map(|_| {
                let u: f64 = rng.random::<f64>().max(1e-300);
                (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * rng.random::<f64>()).cos()
            })
            .collect(),
    )
}

fn pooled(m: &Matrix, vision: bool) -> Vec<TokenBundle> {
    (0..m.rows())
        .map(|i| {
            if vision {
                TokenBundle::pooled_vision(m.row(i))
            } else {
                TokenBundle::pooled_text(m.row(i))
            }
        })
        .collect()
}

/// Recall@k by listing each row's candidates in score order; a tie puts the
/// lower index first.
fn recall_oracle(sim: &Matrix, k: usize, by_rows: bool) -> f64 {
    let n = sim.rows();
    let mut hits = 0;
    for q in 0..n {
        let score = |c: usize| if by_rows { sim[(q, c)] } else { sim[(c, q)] };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        hits += usize::from(order[..k.min(n)].contains(&q));
    }
    hits as f64 / n as f64
}

#[test]
fn three_item_rankings_by_hand() {
    let sim = Matrix::from_rows(&[&[0.9, 0.1, 0.5], &[0.8, 0.3, 0.2], &[0.1, 0.2, 0.7]]);
    let r = recall_from_similarity(&sim, &[1, 2, 3]);
    // Image 1 ranks its caption second (0.8 > 0.3); every caption finds its image first.
    assert_eq!(r.i2t[&1], 2.0 / 3.0);
    assert_eq!(r.i2t[&2], 1.0);
    assert_eq!(r.i2t[&3], 1.0);
    assert_eq!(r.t2i[&1], 1.0);

    let flat = Matrix::filled(3, 3, 0.5);
    let r = recall_from_similarity(&flat, &[1, 2, 3]);
    assert_eq!(
        (r.i2t[&1], r.i2t[&2], r.i2t[&3]),
        (1.0 / 3.0, 2.0 / 3.0, 1.0)
    );
    assert_eq!(
        (r.t2i[&1], r.t2i[&2], r.t2i[&3]),
        (1.0 / 3.0, 2.0 / 3.0, 1.0)
    );
}

#[test]
fn identical_sides_give_perfect_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = gaussian_rows(&mut rng, 30, 8);
    let r = retrieval_recall_bundles(
        &pooled(&m, true),
        &pooled(&m, false),
        &identity_stack(8),
        &[1],
    )
    .unwrap();
    assert_eq!((r.i2t[&1], r.t2i[&1]), (1.0, 1.0));
}

#[test]
fn unrelated_corpora_sit_at_chance() {
    let n = 100;
    let mut sum = 0.0;
    let stack = identity_stack(64);
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = gaussian_rows(&mut rng, n, 64);
        let txt = gaussian_rows(&mut rng, n, 64);
        let r = retrieval_recall_bundles(&pooled(&img, true), &pooled(&txt, false), &stack, &[1])
            .unwrap();
        sum += (r.i2t[&1] + r.t2i[&1]) / 2.0;
    }
    let mean = sum / 50.0;
    assert!((mean - 1.0 / n as f64).abs() <= 0.02, "{mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_matches_sorting_oracle(seed in any::<u64>(), n in 1usize..25, coarse in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse scores force plenty of ties.
        let data = (0..n * n)
            .map(|_| if coarse { f64::from(rng.random_range(0..3u8)) } else { rng.random::<f64>() })
            .collect();
        let sim = Matrix::from_vec(n, n, data);
        let ks = [1, 3, 5, 10];
        let r = recall_from_similarity(&sim, &ks);
        for k in ks {
            prop_assert_eq!(r.i2t[&k], recall_oracle(&sim, k, true));
            prop_assert_eq!(r.t2i[&k], recall_oracle(&sim, k, false));
        }
        for w in ks.windows(2) {
            prop_assert!(r.i2t[&w[0]] <= r.i2t[&w[1]]);
        }
    }

    #[test]
    fn classification_matches_brute_force(seed in any::<u64>(), classes in 2usize..6, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 5;
        let stack = identity_stack(d);
        let protos = gaussian_rows(&mut rng, classes, d);
        let spec = ClassifierSpec::new(
            (0..classes).map(|c| (format!("c{c}"), vec![TokenBundle::pooled_text(protos.row(c))])).collect(),
        )
        .unwrap();
        let imgs = gaussian_rows(&mut rng, n, d);
        let labels: Vec<String> = (0..n).map(|_| format!("c{}", rng.random_range(0..classes))).collect();
        let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let report = zero_shot_classify(&pooled(&imgs, true), &label_refs, &spec, &stack).unwrap();

        // Cosine is scale-free, so the raw dot with each unit prototype decides.
        let unit = |v: &[f64]| { let s = v.iter().map(|x| x * x).sum::<f64>().sqrt(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let mut correct = 0;
        for i in 0..n {
            let x = unit(imgs.row(i));
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for c in 0..classes {
                let s: f64 = x.iter().zip(unit(protos.row(c))).map(|(a, b)| a * b).sum();
                if s > best_s {
                    best_s = s;
                    best = c;
                }
            }
            prop_assert_eq!(report.predictions[i], best);
            correct += usize::from(labels[i] == format!("c{best}"));
        }
        prop_assert_eq!(report.correct, correct);
        prop_assert!((report.top1 - correct as f64 / n as f64).abs() < 1e-15);
    }
}

#[test]
fn classification_counts_per_class() {
    let spec = ClassifierSpec::new(vec![
        ("a".into(), vec![TokenBundle::pooled_text(&[1.0, 0.0])]),
        ("b".into(), vec![TokenBundle::pooled_text(&[0.0, 1.0])]),
    ])
    .unwrap();
    let r = score_predictions(&spec, &[0, 0, 1, 1, 1], vec![0, 1, 1, 1, 0]);
    assert_eq!((r.correct, r.total), (3, 5));
    assert_eq!(r.per_class[0].accuracy, Some(0.5));
    assert!((r.per_class[1].accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

fn two_class_prototypes() -> SegClasses {
    let mut p = BTreeMap::new();
    p.insert(1u32, vec![1.0, 0.0]);
    p.insert(2u32, vec![0.0, 1.0]);
    SegClasses::from_prototypes(p)
}

/// A 2×2 patch grid upsampled to 4×4 pixels; each patch holds a class's
/// direction, so the predicted map is the patch labels blown up 2×.
fn fixture(patch_labels: [u32; 4], gt: Vec<u32>) -> SegInput {
    let rows: Vec<[f64; 2]> = patch_labels
        .iter()
        .map(|&c| if c == 1 { [1.0, 0.1] } else { [0.1, 1.0] })
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    SegInput {
        patches: Matrix::from_rows(&refs),
        grid: (2, 2),
        cls: Matrix::zeros(1, 2),
        gt,
        target: (4, 4),
    }
}

fn upsampled(patch_labels: [u32; 4]) -> Vec<u32> {
    (0..16)
        .map(|p| patch_labels[(p / 4 / 2) * 2 + (p % 4) / 2])
        .collect()
}

/// IoU from an explicit confusion matrix over the foreground classes of `gt`.
fn confusion_oracle(pred: &[u32], gt: &[u32], bg: u32) -> (Vec<(u32, u64, u64)>, f64) {
    let mut conf: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        *conf.entry((g, p)).or_default() += 1;
    }
    let mut classes: Vec<u32> = gt.iter().copied().filter(|&c| c != bg).collect();
    classes.sort_unstable();
    classes.dedup();
    let per: Vec<(u32, u64, u64)> = classes
        .iter()
        .map(|&c| {
            let tp = conf.get(&(c, c)).copied().unwrap_or(0);
            let fn_: u64 = conf
                .iter()
                .filter(|((g, p), _)| *g == c && *p != c)
                .map(|(_, v)| v)
                .sum();
            let fp: u64 = conf
                .iter()
                .filter(|((g, p), _)| *g != c && *p == c)
                .map(|(_, v)| v)
                .sum();
            (c, tp, tp + fn_ + fp)
        })
        .collect();
    let miou = per
        .iter()
        .map(|&(_, i, u)| i as f64 / u as f64)
        .sum::<f64>()
        / per.len() as f64;
    (per, miou)
}

#[test]
fn perfect_prediction_scores_one() {
    let labels = [1, 2, 2, 1];
    let input = fixture(labels, upsampled(labels));
    let r = segment_zero_shot(
        &input,
        &two_class_prototypes(),
        &identity_stack(2),
        &SegOptions::default(),
    )
    .unwrap();
    assert_eq!(r.prediction, upsampled(labels));
    assert_eq!(r.miou, 1.0);
}

#[test]
fn four_by_four_fixtures_match_confusion_counts() {
    let cases: [([u32; 4], [u32; 16]); 3] = [
        (
            [1, 2, 2, 1],
            [1, 1, 2, 2, 1, 0, 2, 2, 2, 2, 1, 1, 2, 2, 1, 1],
        ),
        (
            [1, 1, 1, 2],
            [0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 2, 2, 0, 0, 2, 2],
        ),
        (
            [2, 2, 2, 2],
            [1, 1, 1, 1, 2, 2, 2, 2, 0, 0, 0, 0, 1, 2, 1, 2],
        ),
    ];
    for (labels, gt) in cases {
        let input = fixture(labels, gt.to_vec());
        let r = segment_zero_shot(
            &input,
            &two_class_prototypes(),
            &identity_stack(2),
            &SegOptions::default(),
        )
        .unwrap();
        let (per, miou) = confusion_oracle(&r.prediction, &gt, 0);
        assert_eq!(r.prediction, upsampled(labels));
        assert_eq!(r.per_class.len(), per.len());
        for (got, &(c, i, u)) in r.per_class.iter().zip(&per) {
            assert_eq!((got.class_id, got.intersection, got.union), (c, i, u));
        }
        assert!((r.miou - miou).abs() < 1e-15);
    }
}

#[test]
fn bilinear_agrees_on_constant_patches() {
    let labels = [1, 1, 1, 1];
    let mut gt = vec![1; 16];
    gt[0] = 0;
    let input = fixture(labels, gt);
    let opts = SegOptions {
        upsample: Upsample::Bilinear,
        ..SegOptions::default()
    };
    let r = segment_zero_shot(&input, &two_class_prototypes(), &identity_stack(2), &opts).unwrap();
    assert_eq!(r.prediction, vec![1; 16]);
    assert!((r.miou - 15.0 / 16.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn iou_matches_oracle_on_random_maps(pred in prop::collection::vec(0u32..4, 16), gt in prop::collection::vec(0u32..4, 16)) {
        prop_assume!(gt.iter().any(|&g| g != 0));
        let (per, miou) = foreground_iou(&pred, &gt, 0).unwrap();
        let (want, want_miou) = confusion_oracle(&pred, &gt, 0);
        for (g, &(c, i, u)) in per.iter().zip(&want) {
            prop_assert_eq!((g.class_id, g.intersection, g.union), (c, i, u));
        }
        prop_assert!((miou - want_miou).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&miou));
    }
}

#[test]
fn accumulator_sums_counts_across_images() {
    let labels = [1, 2, 2, 1];
    let stack = identity_stack(2);
    let classes = two_class_prototypes();
    let mut acc = SegAccumulator::default();
    let gts = [upsampled(labels), vec![1; 16]];
    // All classes compete, so the second image still predicts class 2 patches.
    let opts = SegOptions {
        candidates: CandidateSet::AllClasses,
        ..SegOptions::default()
    };
    for gt in &gts {
        let r = segment_zero_shot(&fixture(labels, gt.clone()), &classes, &stack, &opts).unwrap();
        acc.add(&r);
    }
    // Class 1: 8/8 in the first image, 8/16 in the second.
    let per = acc.per_class();
    assert_eq!((per[0].intersection, per[0].union), (16, 24));
    assert_eq!(acc.images, 2);
}
