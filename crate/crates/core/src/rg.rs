//! Normalized rg chromaticity with first-order noise propagation.
//!
//! For `S = R + G + B`, `r = R/S` and `g = G/S`. Linear propagation of
//! independent channel noise gives the 2x2 covariance
//!
//! ```text
//! Var r   = (1/S^2) [ sR^2 (1 - 2R/S) + sS^2 R^2/S^2 ]
//! Cov r,g = (1/S^2) [ -(G sR^2 + R sG^2)/S + sS^2 R G/S^2 ]
//! Var g   = (1/S^2) [ sG^2 (1 - 2G/S) + sS^2 G^2/S^2 ]
//! ```
//!
//! with `sS^2 = sR^2 + sG^2 + sB^2`. The matrix is written below in the
//! factored form `sI^2 / S^2 * (...)` with `sI^2 = sS^2 / 3`, which is the same
//! expression. Under the null hypothesis "not coloured" the covariance is
//! evaluated at `r = g = 1/3` for the observed `S`, and each pixel gets the
//! squared Mahalanobis distance of its `(r, g)` from `(1/3, 1/3)`.

use crate::noise::NoiseModel;
use crate::raster::{FloatMap, ImageRgb};

/// Channel sums below this are too dark for a meaningful chromaticity.
pub const S_FLOOR: f64 = 3.0 / 255.0;
/// Added to the covariance diagonal before inversion.
pub const EPS_REG: f64 = 1e-12;
/// Degrees of freedom of the rg distance.
pub const RG_DOF: usize = 2;

const THIRD: f64 = 1.0 / 3.0;

/// Symmetric 2x2 covariance of `(r, g)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RgCovariance {
    pub var_r: f64,
    pub var_g: f64,
    pub cov_rg: f64,
}

impl RgCovariance {
    pub fn as_array(&self) -> [[f64; 2]; 2] {
        [[self.var_r, self.cov_rg], [self.cov_rg, self.var_g]]
    }

    /// Inverse of the regularized matrix, or `None` when it is singular.
    pub fn regularized_inverse(&self) -> Option<[[f64; 2]; 2]> {
        let (a, d, b) = (self.var_r + EPS_REG, self.var_g + EPS_REG, self.cov_rg);
        let det = a * d - b * b;
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        Some([[d / det, -b / det], [-b / det, a / det]])
    }
}

/// Returned when the pixel is too dark for the rg transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegeneratePixel;

/// Per-pixel `(r, g)`; pixels with `S < S_FLOOR` map to `(1/3, 1/3)`.
pub fn rg_of(p: [f32; 3]) -> Option<(f64, f64)> {
    let [r, g, b] = p.map(|v| v as f64);
    let s = r + g + b;
    (s >= S_FLOOR).then(|| (r / s, g / s))
}

pub fn rg_transform(img: &ImageRgb) -> FloatMap {
    let n = img.len();
    let mut data = vec![0f32; 2 * n];
    for (i, &p) in img.pixels().iter().enumerate() {
        let (r, g) = rg_of(p).unwrap_or((THIRD, THIRD));
        data[i] = r as f32;
        data[n + i] = g as f32;
    }
    FloatMap::from_vec(img.width(), img.height(), 2, data).expect("rg values are finite")
}

/// Propagated covariance of `(r, g)` at the given channel values.
pub fn rg_covariance(
    red: f64,
    green: f64,
    blue: f64,
    noise: &NoiseModel,
) -> Result<RgCovariance, DegeneratePixel> {
    let s = red + green + blue;
    if !(s >= S_FLOOR) {
        return Err(DegeneratePixel);
    }
    let [vr, vg, vb] = noise.rgb().map(|x| x * x);
    let vi = (vr + vg + vb) / 3.0;
    if vi == 0.0 {
        return Ok(RgCovariance {
            var_r: 0.0,
            var_g: 0.0,
            cov_rg: 0.0,
        });
    }
    let pre = vi / (s * s);
    let (rs, gs) = (red / s, green / s);
    let var_r = pre * (vr / vi * (1.0 - 2.0 * rs) + 3.0 * rs * rs);
    let var_g = pre * (vg / vi * (1.0 - 2.0 * gs) + 3.0 * gs * gs);
    let cov_rg = pre * (-(vg * red + vr * green) / (vi * s) + 3.0 * rs * gs);
    Ok(RgCovariance {
        var_r,
        var_g,
        cov_rg,
    })
}

/// Null-hypothesis covariance: the propagated covariance at `R = G = B = S/3`.
pub fn rg_h0_covariance(s: f64, noise: &NoiseModel) -> Result<RgCovariance, DegeneratePixel> {
    rg_covariance(s * THIRD, s * THIRD, s * THIRD, noise)
}

/// Squared Mahalanobis distance of one pixel from the gray point.
pub fn rg_pixel_d2(p: [f32; 3], noise: &NoiseModel) -> Result<f64, DegeneratePixel> {
    let [r, g, b] = p.map(|v| v as f64);
    let s = r + g + b;
    let cov = rg_h0_covariance(s, noise)?;
    let inv = cov.regularized_inverse().ok_or(DegeneratePixel)?;
    let (dr, dg) = (r / s - THIRD, g / s - THIRD);
    let d2 = inv[0][0] * dr * dr + 2.0 * inv[0][1] * dr * dg + inv[1][1] * dg * dg;
    if d2.is_finite() {
        Ok(d2.max(0.0))
    } else {
        Err(DegeneratePixel)
    }
}

#[derive(Clone, Debug)]
pub struct RgOutput {
    /// Channels `r`, `g`.
    pub rg: FloatMap,
    /// Squared Mahalanobis distance to the gray point; 0 on invalid pixels.
    pub d2: FloatMap,
    /// `false` where the pixel was too dark or its covariance singular.
    pub valid: Vec<bool>,
    pub k: usize,
}

impl RgOutput {
    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

pub fn rg_mahalanobis(img: &ImageRgb, noise: &NoiseModel) -> RgOutput {
    let n = img.len();
    let mut d2 = vec![0f32; n];
    let mut valid = vec![true; n];
    for (i, &p) in img.pixels().iter().enumerate() {
        match rg_pixel_d2(p, noise) {
            Ok(v) => d2[i] = v.min(f32::MAX as f64) as f32,
            Err(DegeneratePixel) => valid[i] = false,
        }
    }
    RgOutput {
        rg: rg_transform(img),
        d2: FloatMap::from_vec(img.width(), img.height(), 1, d2).expect("finite distances"),
        valid,
        k: RG_DOF,
    }
}
