//! Multi-scale local binary patterns on intensity, with the neighbour-difference
//! covariance and per-pixel squared Mahalanobis distance to "homogeneous".
//!
//! For a pixel with intensity `I` and neighbours `I_i` on a circle, the
//! differences `z_i = I_i - I` carry independent pixel noise of variance
//! `s^2` each, so `Var z_i = 2 s^2` and `Cov(z_i, z_j) = s^2`: the covariance
//! is `s^2 (Id + J)` with `J` all ones. Its inverse follows from
//! Sherman-Morrison, giving `d^2 = (|z|^2 - (sum z)^2 / (p + 1)) / s^2`.
//!
//! The independence holds only if every neighbour is a distinct raster pixel,
//! which is what [`NeighborSampling::Nearest`] guarantees for the default
//! scales. [`NeighborSampling::Bilinear`] is the textbook LBP sampler; its
//! interpolated neighbours share pixels with each other and with the centre.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{FloatMap, IntensityMap};

/// Smallest intensity sigma used when inverting the covariance.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Neighbour circle of one LBP scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LbpScale {
    pub radius: usize,
    pub points: usize,
}

impl LbpScale {
    pub fn new(radius: usize, points: usize) -> Result<Self> {
        let s = Self { radius, points };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius >= 1 && self.points >= 4 && self.points <= 8 * self.radius && self.points <= 64 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid LBP scale radius={} points={}",
                self.radius, self.points
            )))
        }
    }

    /// Largest code value, `2^p - 1`.
    pub fn max_code(&self) -> u64 {
        if self.points == 64 {
            u64::MAX
        } else {
            (1u64 << self.points) - 1
        }
    }

    /// Parses `"r:p"`.
    pub fn parse(text: &str) -> Result<Self> {
        let (r, p) = text
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("LBP scale {text:?} is not r:p")))?;
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("LBP scale {text:?} is not r:p")))
        };
        Self::new(num(r)?, num(p)?)
    }

    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        let v: Vec<Self> = text
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Self::parse)
            .collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(Error::Config("empty LBP scale list".into()));
        }
        Ok(v)
    }

    /// Sample positions relative to the centre, counter-clockwise from angle 0
    /// (pointing right; image rows grow downwards).
    pub fn circle_positions(&self) -> Vec<(f64, f64)> {
        let snap = |v: f64| {
            let r = v.round();
            if (v - r).abs() < 1e-9 {
                r
            } else {
                v
            }
        };
        (0..self.points)
            .map(|i| {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / self.points as f64;
                (
                    snap(self.radius as f64 * theta.cos()),
                    snap(-(self.radius as f64) * theta.sin()),
                )
            })
            .collect()
    }

    /// Integer offsets used by [`NeighborSampling::Nearest`].
    ///
    /// Each sample, in order, takes the closest pixel within the radius that is
    /// neither the centre nor already taken, so the neighbours stay distinct
    /// pixels even where plain rounding would collide.
    pub fn nearest_offsets(&self) -> Vec<(isize, isize)> {
        let r = self.radius as isize;
        let mut taken = std::collections::HashSet::from([(0isize, 0isize)]);
        self.circle_positions()
            .into_iter()
            .map(|(fx, fy)| {
                let mut best: Option<((isize, isize), f64)> = None;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if taken.contains(&(dx, dy)) {
                            continue;
                        }
                        let d = (dx as f64 - fx).powi(2) + (dy as f64 - fy).powi(2);
                        if best.is_none_or(|(_, b)| d < b - 1e-12) {
                            best = Some(((dx, dy), d));
                        }
                    }
                }
                let (o, _) = best.expect("p <= 8r leaves free pixels");
                taken.insert(o);
                o
            })
            .collect()
    }

    /// True when the neighbours are pairwise distinct pixels other than the centre.
    pub fn nearest_offsets_distinct(&self) -> bool {
        let offs = self.nearest_offsets();
        let mut seen = std::collections::HashSet::new();
        offs.iter().all(|&o| o != (0, 0) && seen.insert(o))
    }
}

pub fn default_scales() -> Vec<LbpScale> {
    vec![
        LbpScale { radius: 1, points: 8 },
        LbpScale { radius: 2, points: 16 },
        LbpScale { radius: 3, points: 24 },
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NeighborSampling {
    /// Each circle position takes the nearest pixel not used by an earlier neighbour.
    #[default]
    Nearest,
    /// Bilinear interpolation between the four surrounding pixels.
    Bilinear,
}

impl std::str::FromStr for NeighborSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            _ => Err(Error::Config(format!("unknown LBP sampling {s:?}"))),
        }
    }
}

/// Precomputed sampling taps for one scale: per neighbour a list of `(dx, dy, weight)`.
#[derive(Clone, Debug)]
pub struct LbpSampler {
    radius: usize,
    taps: Vec<Vec<(isize, isize, f64)>>,
}

impl LbpSampler {
    pub fn new(scale: LbpScale, sampling: NeighborSampling) -> Self {
        let taps = scale
            .circle_positions()
            .into_iter()
            .zip(scale.nearest_offsets())
            .map(|((fx, fy), (nx, ny))| match sampling {
                NeighborSampling::Nearest => vec![(nx, ny, 1.0)],
                NeighborSampling::Bilinear => {
                    let (x0, y0) = (fx.floor(), fy.floor());
                    let (tx, ty) = (fx - x0, fy - y0);
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    [
                        (x0, y0, (1.0 - tx) * (1.0 - ty)),
                        (x0 + 1, y0, tx * (1.0 - ty)),
                        (x0, y0 + 1, (1.0 - tx) * ty),
                        (x0 + 1, y0 + 1, tx * ty),
                    ]
                    .into_iter()
                    .filter(|t| t.2 > 0.0)
                    .collect()
                }
            })
            .collect();
        Self { radius: scale.radius, taps }
    }

    /// Writes the neighbour differences at `(x, y)` into `out` (length `points`);
    /// returns `false` within `radius` of the border.
    pub fn neighbors_into(&self, map: &IntensityMap, x: usize, y: usize, out: &mut [f64]) -> bool {
        if !in_valid_region(map, x, y, self.radius) {
            return false;
        }
        self.differences(map, x, y, out);
        true
    }

    #[inline]
    fn differences(&self, map: &IntensityMap, x: usize, y: usize, out: &mut [f64]) {
        let center = map.get(x, y) as f64;
        for (z, taps) in out.iter_mut().zip(&self.taps) {
            let mut v = 0.0;
            for &(dx, dy, w) in taps {
                v += w * map.get((x as isize + dx) as usize, (y as isize + dy) as usize) as f64;
            }
            *z = v - center;
        }
    }
}

fn in_valid_region(map: &IntensityMap, x: usize, y: usize, r: usize) -> bool {
    x >= r && y >= r && x + r < map.width() && y + r < map.height()
}

/// Neighbour differences `z_i = I_i - I` at one pixel, or `None` within `radius` of the border.
pub fn lbp_neighbors(
    map: &IntensityMap,
    x: usize,
    y: usize,
    scale: LbpScale,
    sampling: NeighborSampling,
) -> Option<Vec<f64>> {
    let mut z = vec![0.0; scale.points];
    LbpSampler::new(scale, sampling).neighbors_into(map, x, y, &mut z).then_some(z)
}

/// Code with bit `i` set iff `z_i >= 0`; bit 0 is the angle-0 neighbour.
pub fn code_from_differences(z: &[f64]) -> u64 {
    z.iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| if v >= 0.0 { acc | (1 << i) } else { acc })
}

/// Per-pixel codes of one scale, row-major; `None` inside the border margin.
pub fn lbp_codes(map: &IntensityMap, scale: LbpScale, sampling: NeighborSampling) -> Vec<Option<u64>> {
    let taps = LbpSampler::new(scale, sampling);
    let mut z = vec![0.0; scale.points];
    let mut out = Vec::with_capacity(map.width() * map.height());
    for y in 0..map.height() {
        for x in 0..map.width() {
            if in_valid_region(map, x, y, scale.radius) {
                taps.differences(map, x, y, &mut z);
                out.push(Some(code_from_differences(&z)));
            } else {
                out.push(None);
            }
        }
    }
    out
}

/// Covariance `s^2 (Id + J)` of the `p` neighbour differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbpCovariance {
    pub sigma: f64,
    pub points: usize,
}

impl LbpCovariance {
    pub fn diagonal(&self) -> f64 {
        2.0 * self.sigma * self.sigma
    }

    pub fn off_diagonal(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// Row-major dense matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        let p = self.points;
        (0..p * p)
            .map(|i| {
                if i / p == i % p {
                    self.diagonal()
                } else {
                    self.off_diagonal()
                }
            })
            .collect()
    }

    /// Spectrum: `s^2` with multiplicity `p - 1` and `(p + 1) s^2` once, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        let mut v = vec![s2; self.points - 1];
        v.push((self.points as f64 + 1.0) * s2);
        v
    }
}

pub fn lbp_covariance(sigma_i: f64, points: usize) -> LbpCovariance {
    LbpCovariance {
        sigma: sigma_i,
        points,
    }
}

/// `z^T (s^2 (Id + J))^-1 z`, with `s` floored at [`SIGMA_FLOOR`].
pub fn lbp_mahalanobis(z: &[f64], sigma_i: f64) -> f64 {
    let s = sigma_i.max(SIGMA_FLOOR);
    let p = z.len() as f64;
    let (sum, sq) = z.iter().fold((0.0, 0.0), |(a, b), &v| (a + v, b + v * v));
    ((sq - sum * sum / (p + 1.0)) / (s * s)).max(0.0)
}

#[derive(Clone, Debug)]
pub struct LbpOutput {
    pub scales: Vec<LbpScale>,
    /// Integer codes per scale, row-major; 0 inside the border margin.
    pub codes: Vec<Vec<u64>>,
    /// One distance channel per scale; 0 inside the border margin.
    pub d2: FloatMap,
    /// Per scale: `false` within `radius` of the border.
    pub valid: Vec<Vec<bool>>,
    /// The intensity sigma was below [`SIGMA_FLOOR`] and got clamped.
    pub sigma_floored: bool,
}

impl LbpOutput {
    /// Codes divided by `2^p - 1`, one channel per scale.
    ///
    /// `f32` cannot hold `code / (2^p - 1)` exactly for large `p`; use
    /// [`LbpOutput::codes`] when the integer is needed.
    pub fn normalized_codes(&self) -> FloatMap {
        let (w, h) = (self.d2.width(), self.d2.height());
        let mut data = Vec::with_capacity(w * h * self.scales.len());
        for (scale, codes) in self.scales.iter().zip(&self.codes) {
            let max = scale.max_code() as f64;
            data.extend(codes.iter().map(|&c| (c as f64 / max) as f32));
        }
        FloatMap::from_vec(w, h, self.scales.len(), data).expect("finite codes")
    }

    pub fn dof(&self, scale_index: usize) -> usize {
        self.scales[scale_index].points
    }
}

/// Codes and distances for each scale, concatenated in scale order.
pub fn lbp_multiscale(
    map: &IntensityMap,
    scales: &[LbpScale],
    sigma_i: f64,
    sampling: NeighborSampling,
) -> Result<LbpOutput> {
    if scales.is_empty() {
        return Err(Error::Config("no LBP scales given".into()));
    }
    for s in scales {
        s.validate()?;
    }
    let max_r = scales.iter().map(|s| s.radius).max().unwrap_or(1);
    let (w, h) = (map.width(), map.height());
    if w < 2 * max_r + 2 || h < 2 * max_r + 2 {
        return Err(Error::Shape(format!(
            "LBP radius {max_r} needs at least {0}x{0} pixels, got {w}x{h}",
            2 * max_r + 2
        )));
    }
    if !(sigma_i >= 0.0 && sigma_i.is_finite()) {
        return Err(Error::Value(format!("intensity sigma {sigma_i}")));
    }
    let per_scale: Vec<(Vec<u64>, Vec<f32>, Vec<bool>)> = scales
        .par_iter()
        .map(|&scale| {
            let taps = LbpSampler::new(scale, sampling);
            let mut z = vec![0.0; scale.points];
            let mut codes = vec![0u64; w * h];
            let mut d2 = vec![0f32; w * h];
            let mut valid = vec![false; w * h];
            for y in 0..h {
                for x in 0..w {
                    if !in_valid_region(map, x, y, scale.radius) {
                        continue;
                    }
                    let i = y * w + x;
                    taps.differences(map, x, y, &mut z);
                    codes[i] = code_from_differences(&z);
                    d2[i] = lbp_mahalanobis(&z, sigma_i).min(f32::MAX as f64) as f32;
                    valid[i] = true;
                }
            }
            (codes, d2, valid)
        })
        .collect();

    let mut codes = Vec::new();
    let mut valid = Vec::new();
    let mut d2 = Vec::with_capacity(w * h * scales.len());
    for (c, d, v) in per_scale {
        codes.push(c);
        d2.extend(d);
        valid.push(v);
    }
    Ok(LbpOutput {
        scales: scales.to_vec(),
        codes,
        d2: FloatMap::from_vec(w, h, scales.len(), d2)?,
        valid,
        sigma_floored: sigma_i < SIGMA_FLOOR,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> IntensityMap {
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        IntensityMap::new(w, h, data).unwrap()
    }

    #[test]
    fn scale_validation_and_parsing() {
        assert!(LbpScale::new(1, 8).is_ok());
        assert!(LbpScale::new(1, 9).is_err());
        assert!(LbpScale::new(0, 4).is_err());
        assert!(LbpScale::new(2, 3).is_err());
        assert_eq!(
            LbpScale::parse_list("1:8, 2:16,3:24").unwrap(),
            default_scales()
        );
        assert!(LbpScale::parse("1-8").is_err());
    }

    #[test]
    fn default_scales_use_distinct_pixels() {
        for s in default_scales() {
            assert!(s.nearest_offsets_distinct(), "{s:?}");
        }
        assert!(LbpScale::new(5, 40).unwrap().nearest_offsets_distinct());
        // r = 1 with 8 points is the classic 3x3 ring
        let ring = LbpScale::new(1, 8).unwrap().nearest_offsets();
        assert_eq!(
            ring,
            vec![(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)]
        );
    }

    #[test]
    fn constant_image_has_zero_differences_and_all_ones_code() {
        let m = map(9, 9, |_, _| 0.42);
        for sampling in [NeighborSampling::Nearest, NeighborSampling::Bilinear] {
            let z = lbp_neighbors(&m, 4, 4, LbpScale::new(2, 16).unwrap(), sampling).unwrap();
            assert!(z.iter().all(|&v| v.abs() < 1e-12));
        }
        let codes = lbp_codes(&m, LbpScale::new(1, 8).unwrap(), NeighborSampling::Nearest);
        assert_eq!(codes[4 * 9 + 4], Some(255));
        assert_eq!(codes[0], None);
    }

    #[test]
    fn step_edge_p4() {
        // columns left of centre 0.2, centre column 0.5, right 0.8
        let m = map(5, 5, |x, _| match x {
            0 | 1 => 0.2,
            2 => 0.5,
            _ => 0.8,
        });
        for sampling in [NeighborSampling::Nearest, NeighborSampling::Bilinear] {
            let z = lbp_neighbors(&m, 2, 2, LbpScale::new(1, 4).unwrap(), sampling).unwrap();
            let expect = [0.8f32 as f64 - 0.5f32 as f64, 0.0, 0.2f32 as f64 - 0.5f32 as f64, 0.0];
            for (a, b) in z.iter().zip(expect) {
                assert_eq!(*a, b);
            }
            assert_eq!(code_from_differences(&z), 0b1011);
        }
    }

    #[test]
    fn axis_neighbours_need_no_interpolation() {
        let m = map(9, 9, |x, y| (x * 9 + y) as f32 / 81.0);
        let s = LbpScale::new(2, 16).unwrap();
        let z = lbp_neighbors(&m, 4, 4, s, NeighborSampling::Bilinear).unwrap();
        let c = m.get(4, 4) as f64;
        assert_eq!(z[0], m.get(6, 4) as f64 - c);
        assert_eq!(z[4], m.get(4, 2) as f64 - c);
        assert_eq!(z[8], m.get(2, 4) as f64 - c);
        assert_eq!(z[12], m.get(4, 6) as f64 - c);
    }

    #[test]
    fn brighter_and_darker_neighbourhoods() {
        let bright = map(3, 3, |x, y| if (x, y) == (1, 1) { 0.1 } else { 0.9 });
        let dark = map(3, 3, |x, y| if (x, y) == (1, 1) { 0.9 } else { 0.1 });
        let s = LbpScale::new(1, 8).unwrap();
        assert_eq!(lbp_codes(&bright, s, NeighborSampling::Nearest)[4], Some(255));
        assert_eq!(lbp_codes(&dark, s, NeighborSampling::Nearest)[4], Some(0));
    }

    #[test]
    fn covariance_values() {
        let c = lbp_covariance(0.01, 8);
        let d = c.to_dense();
        assert_eq!(d.len(), 64);
        assert!((d[0] - 2e-4).abs() < 1e-18 && (d[1] - 1e-4).abs() < 1e-18);
        assert!((d[9] - 2e-4).abs() < 1e-18);
        let ev = c.eigenvalues();
        assert_eq!(ev.len(), 8);
        assert!((ev[7] - 9e-4).abs() < 1e-18);
    }

    #[test]
    fn mahalanobis_zero_and_floor() {
        assert_eq!(lbp_mahalanobis(&[0.0; 8], 0.01), 0.0);
        let d = lbp_mahalanobis(&[1e-6, 0.0, 0.0, 0.0], 0.0);
        assert!(d.is_finite() && d > 0.0);
    }

    #[test]
    fn multiscale_shapes_and_errors() {
        let m = map(48, 48, |x, y| ((x * 31 + y * 17) % 13) as f32 / 13.0);
        let out = lbp_multiscale(&m, &default_scales(), 0.01, NeighborSampling::Nearest).unwrap();
        assert_eq!(out.normalized_codes().channels(), 3);
        assert_eq!(out.d2.channels(), 3);
        assert!(!out.valid[2][2 * 48 + 10] && out.valid[1][2 * 48 + 10]);

        let single = lbp_multiscale(&m, &[LbpScale::new(1, 8).unwrap()], 0.01, NeighborSampling::Nearest).unwrap();
        let direct = lbp_codes(&m, LbpScale::new(1, 8).unwrap(), NeighborSampling::Nearest);
        for (i, c) in direct.iter().enumerate() {
            assert_eq!(c.unwrap_or(0), single.codes[0][i]);
        }

        let small = map(7, 20, |_, _| 0.5);
        assert!(matches!(
            lbp_multiscale(&small, &default_scales(), 0.01, NeighborSampling::Nearest),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn constant_image_has_zero_distance() {
        let m = map(16, 16, |_, _| 0.3);
        let out = lbp_multiscale(&m, &default_scales(), 0.0, NeighborSampling::Nearest).unwrap();
        assert!(out.d2.data().iter().all(|&v| v == 0.0));
        assert!(out.sigma_floored);
    }

    #[test]
    fn normalized_codes_recover_integers_for_p8() {
        let s = LbpScale::new(1, 8).unwrap();
        for code in 0..=255u64 {
            let v = (code as f64 / s.max_code() as f64) as f32;
            let back = v as f64 * s.max_code() as f64;
            assert!((back - back.round()).abs() < 1e-4 && back.round() as u64 == code);
        }
    }
}
