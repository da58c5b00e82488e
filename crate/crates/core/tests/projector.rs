use latent_align_core::grad::gelu;
use latent_align_core::matrix::Matrix;
use latent_align_core::projector::{
    init_stack, token_project, GlobalKind, GlobalSlot, ProjectorError, ProjectorStack, SlotKind,
    StackDims, StackLayout, TokenBundle, TokenProjectorParams, TokenSlot, TwoLayer,
};
use proptest::prelude::*;

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(rows)
}

/// 2 → 2 token projector with W_lin = I and a branch that adds
/// `gelu(x0 + x1)` to the first output.
fn toy_token() -> TokenProjectorParams {
    TokenProjectorParams {
        w_lin: Matrix::identity(2),
        branch: TwoLayer {
            w1: m(&[&[1.0], &[1.0]]),
            b1: m(&[&[0.0]]),
            w2: m(&[&[1.0, 0.0]]),
        },
    }
}

#[test]
fn token_projector_by_hand() {
    let y = token_project(&toy_token(), &m(&[&[1.0, 2.0], &[-1.0, 0.5]])).unwrap();
    assert!((y[(0, 0)] - (1.0 + gelu(3.0))).abs() < 1e-15);
    assert_eq!(y[(0, 1)], 2.0);
    assert!((y[(1, 0)] - (-1.0 + gelu(-0.5))).abs() < 1e-15);
    assert_eq!(y[(1, 1)], 0.5);
}

#[test]
fn gelu_reference_points() {
    assert_eq!(gelu(0.0), 0.0);
    // x·Φ(x) with Φ(1) = 0.8413447460685429.
    assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
    assert!((gelu(-1.0) + 0.15865525393145707).abs() < 1e-12);
}

fn hand_stack() -> ProjectorStack {
    ProjectorStack {
        dims: StackDims {
            d_in_vision: 2,
            d_in_text: 2,
            d_out: 2,
            hidden: 1,
        },
        vision_local: TokenSlot::Token(toy_token()),
        vision_cls: TokenSlot::Identity,
        text_local: TokenSlot::Identity,
        text_global: GlobalSlot::Mlp(TwoLayer {
            w1: m(&[&[1.0], &[0.0]]),
            b1: m(&[&[0.5]]),
            w2: m(&[&[2.0, -1.0]]),
        }),
        pooled_only: false,
        seed: 0,
    }
}

#[test]
fn vision_mean_plus_cls_then_normalize() {
    let s = hand_stack();
    let locals = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let cls = m(&[&[0.0, 3.0]]);
    let b = TokenBundle::new(locals, Some(cls)).unwrap();
    // Locals map to (1 + gelu(1), 0) and (gelu(1), 1); mean (0.5 + gelu(1), 0.5).
    let g = [0.5 + gelu(1.0), 0.5 + 3.0];
    let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
    let v = s.project_vision(&b).unwrap();
    assert!((v[0] - g[0] / n).abs() < 1e-14 && (v[1] - g[1] / n).abs() < 1e-14);
}

#[test]
fn text_mean_then_global_mlp() {
    let s = hand_stack();
    let b = TokenBundle::new(m(&[&[1.0, 4.0], &[3.0, -2.0]]), None).unwrap();
    // mean = (2, 1); hidden = gelu(2 + 0.5); out = hidden · (2, −1).
    let h = gelu(2.5);
    let out = [2.0 * h, -h];
    let n = (out[0] * out[0] + out[1] * out[1]).sqrt();
    let v = s.project_text(&b).unwrap();
    assert!((v[0] - out[0] / n).abs() < 1e-14 && (v[1] - out[1] / n).abs() < 1e-14);
}

#[test]
fn pooled_only_uses_cls_alone() {
    let mut s = hand_stack();
    s.pooled_only = true;
    let b = TokenBundle::new(m(&[&[9.0, 9.0]]), Some(m(&[&[3.0, 4.0]]))).unwrap();
    assert_eq!(s.project_vision(&b).unwrap(), vec![0.6, 0.8]);
    let no_cls = TokenBundle::new(m(&[&[1.0, 1.0]]), None).unwrap();
    assert_eq!(s.project_vision(&no_cls), Err(ProjectorError::MissingCls));
}

#[test]
fn zero_output_is_an_error() {
    let s = hand_stack();
    let b = TokenBundle::new(Matrix::zeros(0, 2), Some(m(&[&[0.0, 0.0]]))).unwrap();
    assert_eq!(s.project_vision(&b), Err(ProjectorError::ZeroOutput));
}

#[test]
fn identity_slot_needs_matching_dims() {
    let layout = StackLayout {
        vision_local: SlotKind::Identity,
        ..StackLayout::default()
    };
    assert!(matches!(
        init_stack(StackDims::new(8, 8, 4), layout, false, 0),
        Err(ProjectorError::DimensionMismatch { .. })
    ));
    let text_identity = StackLayout {
        text_local: SlotKind::Mlp,
        text_global: GlobalKind::Identity,
        ..StackLayout::default()
    };
    assert!(init_stack(StackDims::new(8, 6, 4), text_identity, false, 0).is_ok());
}

#[test]
fn parameter_count_formula() {
    let (dv, dt, d, h) = (7usize, 5usize, 4usize, 3usize);
    let dims = StackDims {
        d_in_vision: dv,
        d_in_text: dt,
        d_out: d,
        hidden: h,
    };
    let s = init_stack(dims, StackLayout::default(), false, 1).unwrap();
    let token = |din: usize| din * d + din * h + h + h * d;
    let global = d * h + h + h * d;
    assert_eq!(s.num_params(), 2 * token(dv) + token(dt) + global);
}

#[test]
fn default_dims_stay_under_thirty_million() {
    let s = init_stack(
        StackDims::new(1024, 1024, 768),
        StackLayout::default(),
        false,
        0,
    )
    .unwrap();
    assert!(s.num_params() < 30_000_000, "{}", s.num_params());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outputs_are_unit_norm(seed in any::<u64>(), t in 1usize..5, vals in prop::collection::vec(-2.0f64..2.0, 30)) {
        let s = init_stack(StackDims::new(3, 3, 4), StackLayout::default(), false, seed).unwrap();
        let locals = Matrix::from_vec(t, 3, vals.iter().cycle().take(3 * t).copied().collect());
        let cls = Matrix::from_vec(1, 3, vals[27..30].to_vec());
        let b = TokenBundle::new(locals, Some(cls)).unwrap();
        if let Ok(v) = s.project_vision(&b) {
            prop_assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        if let Ok(v) = s.project_text(&b) {
            prop_assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn token_order_does_not_matter(seed in any::<u64>(), vals in prop::collection::vec(-2.0f64..2.0, 12)) {
        let s = init_stack(StackDims::new(3, 3, 4), StackLayout::default(), false, seed).unwrap();
        let fwd = Matrix::from_vec(4, 3, vals.clone());
        let rev_rows: Vec<&[f64]> = (0..4).rev().map(|i| fwd.row(i)).collect();
        let rev = Matrix::from_rows(&rev_rows);
        let a = s.project_text(&TokenBundle::new(fwd, None).unwrap());
        let b = s.project_text(&TokenBundle::new(rev, None).unwrap());
        if let (Ok(a), Ok(b)) = (a, b) {
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn payload_round_trip(seed in any::<u64>()) {
        let s = init_stack(StackDims::new(5, 3, 4), StackLayout::default(), true, seed).unwrap();
        let back = ProjectorStack::from_payload(s.dims, s.layout(), true, seed, &s.to_payload()).unwrap();
        prop_assert_eq!(back, s);
    }
}
