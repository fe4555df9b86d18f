//! Gray-point illuminant estimation and von Kries diagonal correction.
//!
//! The illuminant is read off the mean rg chromaticity of near-gray pixels and
//! removed with per-channel gains applied in RGB, so the noise model can be
//! scaled by the same gains and stay valid for the rg covariance downstream.

use crate::error::{Error, Result};
use crate::noise::NoiseModel;
use crate::raster::ImageRgb;

pub const DEFAULT_DELTA: f64 = 0.05;
/// Pixels darker than this channel sum do not vote for the gray point.
pub const DARK_PIXEL_FLOOR: f64 = 0.05;
/// Smallest chromaticity component accepted as an illuminant estimate.
pub const GAIN_EPSILON: f64 = 1e-3;

const THIRD: f64 = 1.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrayPointEstimate {
    pub r_bar: f64,
    pub g_bar: f64,
    pub support_count: usize,
}

impl GrayPointEstimate {
    /// The neutral gray point; corrections with it are the identity.
    pub fn neutral() -> Self {
        Self {
            r_bar: THIRD,
            g_bar: THIRD,
            support_count: 1,
        }
    }

    pub fn b_bar(&self) -> f64 {
        1.0 - self.r_bar - self.g_bar
    }

    /// Per-channel von Kries gains `(1/3)/r_bar, (1/3)/g_bar, (1/3)/b_bar`.
    pub fn gains(&self) -> Result<[f64; 3]> {
        let chroma = [self.r_bar, self.g_bar, self.b_bar()];
        if chroma.iter().any(|c| !(*c > GAIN_EPSILON)) {
            return Err(Error::DegenerateIlluminant(format!(
                "gray point ({:.6}, {:.6}) leaves a channel below {GAIN_EPSILON}",
                self.r_bar, self.g_bar
            )));
        }
        // a neutral estimate should give exactly unit gains despite rounding in b_bar
        Ok(chroma.map(|c| {
            let g = THIRD / c;
            if (g - 1.0).abs() < 1e-12 {
                1.0
            } else {
                g
            }
        }))
    }
}

/// Mean (r, g) of non-dark pixels whose r and g both lie within `delta` of 1/3.
pub fn estimate_gray_point(img: &ImageRgb, delta: f64) -> Result<GrayPointEstimate> {
    if !(delta > 0.0 && delta < THIRD) {
        return Err(Error::Config(format!("gray-point delta {delta} outside (0, 1/3)")));
    }
    let (lo, hi) = (THIRD - delta, THIRD + delta);
    let (mut sr, mut sg, mut n) = (0.0, 0.0, 0usize);
    for p in img.pixels() {
        let [r, g, b] = p.map(|v| v as f64);
        let s = r + g + b;
        if s < DARK_PIXEL_FLOOR {
            continue;
        }
        let (cr, cg) = (r / s, g / s);
        if (lo..=hi).contains(&cr) && (lo..=hi).contains(&cg) {
            sr += cr;
            sg += cg;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::GrayPoint(format!(
            "no pixel with chromaticity within {delta} of gray"
        )));
    }
    Ok(GrayPointEstimate {
        r_bar: sr / n as f64,
        g_bar: sg / n as f64,
        support_count: n,
    })
}

#[derive(Clone, Debug)]
pub struct Correction {
    pub image: ImageRgb,
    pub noise: NoiseModel,
    pub gains: [f64; 3],
    /// Channel values that had to be clamped into `[0,1]`.
    pub clipped: usize,
}

/// Applies the gray-point gains to the image and scales the noise model with them.
///
/// Channel sigmas scale linearly. The intensity sigma keeps its ratio to the
/// independent-channel prediction, since it was estimated separately.
pub fn correct_illumination(
    img: &ImageRgb,
    gp: &GrayPointEstimate,
    noise: &NoiseModel,
) -> Result<Correction> {
    let gains = gp.gains()?;
    let mut clipped = 0usize;
    let data = img
        .pixels()
        .iter()
        .map(|p| {
            let mut out = [0f32; 3];
            for c in 0..3 {
                let v = p[c] as f64 * gains[c];
                if v > 1.0 {
                    clipped += 1;
                }
                out[c] = v.min(1.0) as f32;
            }
            out
        })
        .collect();
    let image = ImageRgb::new(img.width(), img.height(), data)?;

    let [kr, kg, kb] = gains;
    let before = noise.independent_intensity_sigma();
    let scaled = NoiseModel {
        sigma_r: noise.sigma_r * kr,
        sigma_g: noise.sigma_g * kg,
        sigma_b: noise.sigma_b * kb,
        sigma_i: 0.0,
    };
    let after = scaled.independent_intensity_sigma();
    let sigma_i = if before > 0.0 {
        noise.sigma_i * after / before
    } else {
        noise.sigma_i * (kr + kg + kb) / 3.0
    };
    Ok(Correction {
        image,
        noise: NoiseModel::new(scaled.sigma_r, scaled.sigma_g, scaled.sigma_b, sigma_i)?,
        gains,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_image_has_neutral_gray_point() {
        let img = ImageRgb::filled(8, 8, [0.4, 0.4, 0.4]).unwrap();
        let gp = estimate_gray_point(&img, DEFAULT_DELTA).unwrap();
        assert!((gp.r_bar - THIRD).abs() < 1e-7 && (gp.g_bar - THIRD).abs() < 1e-7);
        assert_eq!(gp.support_count, 64);
    }

    #[test]
    fn red_image_has_no_gray_point() {
        let img = ImageRgb::filled(8, 8, [1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            estimate_gray_point(&img, 0.05),
            Err(Error::GrayPoint(_))
        ));
    }

    #[test]
    fn dark_pixels_do_not_vote() {
        let img = ImageRgb::filled(8, 8, [0.01, 0.01, 0.01]).unwrap();
        assert!(estimate_gray_point(&img, 0.05).is_err());
    }

    #[test]
    fn gain_distorted_gray_is_recovered() {
        let base = 0.5f64;
        let img = ImageRgb::filled(
            8,
            8,
            [(1.1 * base) as f32, base as f32, (0.9 * base) as f32],
        )
        .unwrap();
        let gp = estimate_gray_point(&img, 0.05).unwrap();
        assert!((gp.r_bar - 1.1 / 3.0).abs() < 1e-6);
        assert!((gp.g_bar - THIRD).abs() < 1e-6);
        let c = correct_illumination(&img, &gp, &NoiseModel::zero()).unwrap();
        for p in c.image.pixels() {
            assert!((p[0] - p[1]).abs() < 1e-5 && (p[1] - p[2]).abs() < 1e-5);
        }
        assert_eq!(c.clipped, 0);
    }

    #[test]
    fn neutral_gray_point_is_identity() {
        let img = ImageRgb::from_fn(8, 8, |x, y| [x as f32 / 8.0, y as f32 / 8.0, 0.5]).unwrap();
        let noise = NoiseModel::new(0.01, 0.02, 0.03, 0.01).unwrap();
        let c = correct_illumination(&img, &GrayPointEstimate::neutral(), &noise).unwrap();
        assert_eq!(c.image, img);
        assert_eq!(c.noise, noise);
        assert_eq!(c.gains, [1.0; 3]);
    }

    #[test]
    fn degenerate_gray_point_rejected() {
        let gp = GrayPointEstimate {
            r_bar: 0.6,
            g_bar: 0.3999,
            support_count: 3,
        };
        assert!(matches!(
            correct_illumination(
                &ImageRgb::filled(8, 8, [0.5; 3]).unwrap(),
                &gp,
                &NoiseModel::zero()
            ),
            Err(Error::DegenerateIlluminant(_))
        ));
    }

    #[test]
    fn clipping_is_counted() {
        let img = ImageRgb::filled(8, 8, [0.9, 0.9, 0.9]).unwrap();
        let gp = GrayPointEstimate {
            r_bar: 0.25,
            g_bar: THIRD,
            support_count: 1,
        };
        let c = correct_illumination(&img, &gp, &NoiseModel::zero()).unwrap();
        // gain on R is 4/3, pushing 0.9 past 1
        assert_eq!(c.clipped, 64);
        assert!(c.image.pixels().iter().all(|p| p[0] == 1.0));
    }
}
