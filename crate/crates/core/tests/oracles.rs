mod common;

use common::checks;

fn pass(check: checks::Check) {
    if let Err(e) = check {
        panic!("{e}");
    }
}

#[test]
fn mgp_head_matches_straight_line_oracle() {
    pass(checks::mgp_matches_oracle());
}

#[test]
fn fixation_filter_is_exact_and_threshold_monotone() {
    pass(checks::filter_is_exact_and_monotone());
}

#[test]
fn gazemix_preserves_background_and_label_geometry() {
    pass(checks::gazemix_invariants());
}

#[test]
fn loss_combination_and_uniform_cross_entropy() {
    pass(checks::loss_algebra());
}

#[test]
fn teacher_is_an_exact_moving_average() {
    pass(checks::ema_contract());
}

#[test]
fn metrics_match_brute_force() {
    pass(checks::metrics_match_oracle());
}

#[test]
fn conv_matches_naive_loops() {
    use common::{naive_conv, rng, uniform};
    use gazeseg::ndnet::{kernels, ConvSpec, Padding};
    use rand::Rng;
    let mut r = rng(5);
    for _ in 0..20 {
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=k / 2 + 1);
        let (c, o) = (r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(k..k + 8), r.random_range(k..k + 8));
        let x = uniform(&[2, c, h, w], -1.0, 1.0, &mut r);
        let wt = uniform(&[o, c, k, k], -1.0, 1.0, &mut r);
        let b = uniform(&[o], -1.0, 1.0, &mut r);
        let spec = ConvSpec {
            stride,
            padding: Padding::Explicit(pad),
        };
        let got = kernels::conv2d(&x, &wt, Some(&b), spec).unwrap();
        let want = naive_conv(&x, &wt, Some(&b), stride, pad);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
