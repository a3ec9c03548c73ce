mod common;

use echoqa::metrics::*;

#[test]
fn metrics_match_loop_oracles() {
    for r in common::all(50, 0x0bac1e) {
        assert!(
            r.passed(),
            "{}: deviation {:e} over {} cases (tolerance {:e})",
            r.name,
            r.max_deviation,
            r.cases,
            r.tolerance
        );
    }
}

#[test]
fn constant_shift_moves_band_means_only() {
    let px: Vec<f32> = (0..40 * 24).map(|i| ((i * 37) % 101) as f32 / 400.0).collect();
    let frame = Frame::new(40, 24, px.clone(), Origin::Imported).unwrap();
    let shifted = Frame::new(40, 24, px.iter().map(|v| v + 0.25).collect(), Origin::Imported).unwrap();
    let (a, b) = (
        depth_gain_profile(&frame, 4).unwrap(),
        depth_gain_profile(&shifted, 4).unwrap(),
    );
    for i in 0..4 {
        assert!((b.band_means[i] - a.band_means[i] - 0.25).abs() < 1e-6);
        assert!((b.band_variances[i] - a.band_variances[i]).abs() < 1e-6);
    }
}

#[test]
fn spearman_is_rank_pearson() {
    let x = [0.1, 0.4, 0.4, 0.9, 0.2];
    let y = [1.0, 3.0, 2.0, 5.0, 0.0];
    // ranks x: 1, 3.5, 3.5, 5, 2; ranks y: 2, 4, 3, 5, 1
    let (rx, ry) = ([1.0, 3.5, 3.5, 5.0, 2.0], [2.0, 4.0, 3.0, 5.0, 1.0]);
    assert_eq!(ranks(&x), rx);
    assert_eq!(ranks(&y), ry);
    let m = 3.0;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - m) * (a - m)).sum();
    let syy: f64 = ry.iter().map(|b| (b - m) * (b - m)).sum();
    assert!((spearman(&x, &y).unwrap() - sxy / (sxx * syy).sqrt()).abs() < 1e-12);
}
