mod common;

use common::{flat, noisy_image};
use dhc_core::noise::NoiseModel;
use dhc_core::rg::{rg_covariance, rg_h0_covariance, rg_mahalanobis, rg_pixel_d2, rg_transform};
use dhc_core::synth::{ks_p_value, ks_statistic, mc_oracle_rg_cov};
use dhc_core::ImageRgb;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn assert_entries_close(a: [[f64; 2]; 2], b: [[f64; 2]; 2], tol: f64) {
    for i in 0..2 {
        for j in 0..2 {
            let rel = (a[i][j] - b[i][j]).abs() / b[i][j].abs();
            assert!(rel < tol, "entry ({i},{j}): {} vs {}", a[i][j], b[i][j]);
        }
    }
}

#[test]
fn gray_pixel_matches_closed_form_and_monte_carlo() {
    let (c, sigma) = (0.4, 0.01);
    let noise = NoiseModel::uniform(sigma).unwrap();
    let analytic = rg_covariance(c, c, c, &noise).unwrap().as_array();
    let f = sigma * sigma / (27.0 * c * c);
    let closed = [[2.0 * f, -f], [-f, 2.0 * f]];
    assert_entries_close(analytic, closed, 1e-9);
    let mc = mc_oracle_rg_cov([c; 3], &noise, 1_000_000, 5).unwrap();
    assert_entries_close(analytic, mc, 0.02);
}

#[test]
fn coloured_pixel_matches_monte_carlo() {
    let noise = NoiseModel::uniform(0.02).unwrap();
    let analytic = rg_covariance(0.5, 0.3, 0.2, &noise).unwrap().as_array();
    let mc = mc_oracle_rg_cov([0.5, 0.3, 0.2], &noise, 1_000_000, 6).unwrap();
    assert_entries_close(analytic, mc, 0.05);
}

#[test]
fn h0_covariance_is_reference_evaluation_at_gray() {
    let noise = NoiseModel::from_channels(0.01, 0.02, 0.03).unwrap();
    for s in [0.3, 0.9, 2.4] {
        let h0 = rg_h0_covariance(s, &noise).unwrap().as_array();
        let direct = rg_covariance(s / 3.0, s / 3.0, s / 3.0, &noise).unwrap().as_array();
        assert_entries_close(h0, direct, 1e-12);
        let doubled = rg_h0_covariance(2.0 * s, &noise).unwrap().as_array();
        for i in 0..2 {
            for j in 0..2 {
                assert!((doubled[i][j] * 4.0 - h0[i][j]).abs() <= 1e-12 * h0[i][j].abs());
            }
        }
    }
}

#[test]
fn first_order_approximation_breaks_down_for_dark_noisy_pixels() {
    let noise = NoiseModel::uniform(0.1).unwrap();
    let analytic = rg_covariance(0.1, 0.1, 0.1, &noise).unwrap().as_array();
    let mc = mc_oracle_rg_cov([0.1; 3], &noise, 200_000, 7).unwrap();
    let rel = (analytic[0][0] - mc[0][0]).abs() / mc[0][0];
    assert!(rel > 0.05, "expected divergence, got {rel}");
}

#[test]
fn null_distances_are_chi_squared_two() {
    let sigma = 0.02;
    let img = noisy_image(320, 320, [sigma; 3], 8, flat(0.5));
    let out = rg_mahalanobis(&img, &NoiseModel::uniform(sigma).unwrap());
    let d2: Vec<f64> = out.d2.data().iter().map(|&v| v as f64).collect();
    assert!(out.valid.iter().all(|&v| v));
    let mean = d2.iter().sum::<f64>() / d2.len() as f64;
    assert!((mean - 2.0).abs() < 0.1, "mean {mean}");
    let chi = ChiSquared::new(2.0).unwrap();
    let d = ks_statistic(&d2, |x| chi.cdf(x));
    assert!(ks_p_value(d, d2.len()) > 0.01, "KS D = {d}");
}

#[test]
fn pure_red_is_strongly_coloured() {
    let d2 = rg_pixel_d2([1.0, 0.0, 0.0], &NoiseModel::uniform(0.01).unwrap()).unwrap();
    assert!(d2 >= 1e3, "{d2}");
}

proptest! {
    #[test]
    fn transform_is_intensity_invariant(
        r in 0.05f32..1.0, g in 0.05f32..1.0, b in 0.05f32..1.0, exp in -4i32..=0,
    ) {
        // powers of two keep the scaling exact in f32
        let c = 2f32.powi(exp);
        prop_assume!((r + g + b) * c >= 3.0 / 255.0);
        let img = ImageRgb::filled(2, 2, [r, g, b]).unwrap();
        let scaled = ImageRgb::filled(2, 2, [r * c, g * c, b * c]).unwrap();
        let (a, b) = (rg_transform(&img), rg_transform(&scaled));
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn distances_are_per_pixel(seed in 0u64..1000, a in 0usize..64, b in 0usize..64) {
        let img = noisy_image(8, 8, [0.05; 3], seed, |x, y| [0.2 + 0.05 * x as f64, 0.4, 0.3 + 0.03 * y as f64]);
        let mut px = img.pixels().to_vec();
        px.swap(a, b);
        let swapped = ImageRgb::new(8, 8, px).unwrap();
        let noise = NoiseModel::uniform(0.05).unwrap();
        let d = rg_mahalanobis(&img, &noise).d2;
        let s = rg_mahalanobis(&swapped, &noise).d2;
        let mut expected = d.data().to_vec();
        expected.swap(a, b);
        prop_assert_eq!(expected.as_slice(), s.data());
    }
}
