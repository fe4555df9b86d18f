#![allow(dead_code)]

use dhc_core::ImageRgb;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Image from `base(x, y)` plus i.i.d. Gaussian noise per channel, unclamped.
pub fn noisy_image(
    width: usize,
    height: usize,
    sigma: [f64; 3],
    seed: u64,
    base: impl Fn(usize, usize) -> [f64; 3],
) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals = sigma.map(|s| Normal::new(0.0, s).unwrap());
    ImageRgb::from_fn(width, height, |x, y| {
        let b = base(x, y);
        [0, 1, 2].map(|c| (b[c] + normals[c].sample(&mut rng)) as f32)
    })
    .unwrap()
}

pub fn flat(level: f64) -> impl Fn(usize, usize) -> [f64; 3] {
    move |_, _| [level; 3]
}

pub fn rel_err(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).abs() / truth
}
