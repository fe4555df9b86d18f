//! Single-image Gaussian noise estimation.
//!
//! Low-structure pixels are selected by Sobel gradient magnitude after
//! excluding the neighbourhood of Canny edges and the extreme tails of local
//! intensity and saturation. The noise standard deviation is then the scaled
//! mean absolute response of the 3x3 Laplacian-difference kernel
//! `[[1,-2,1],[-2,4,-2],[1,-2,1]]` over the selected pixels (Immerkær).
//!
//! For pure Gaussian noise the Sobel responses, the 3x3 local means and the
//! Laplacian response of a pixel are mutually uncorrelated, so the selection
//! does not bias the estimate. That is why the tail exclusions look at 3x3
//! local means rather than at the centre pixel itself.

use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::raster::{intensity, FloatMap, ImageRgb};

/// Per-channel noise standard deviations in normalized `[0,1]` units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma_r: f64,
    pub sigma_g: f64,
    pub sigma_b: f64,
    /// Noise of the intensity map, estimated on that map directly.
    pub sigma_i: f64,
}

impl NoiseModel {
    pub fn new(sigma_r: f64, sigma_g: f64, sigma_b: f64, sigma_i: f64) -> Result<Self> {
        let m = Self {
            sigma_r,
            sigma_g,
            sigma_b,
            sigma_i,
        };
        if [sigma_r, sigma_g, sigma_b, sigma_i]
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(Error::Value(format!("invalid noise model {m:?}")));
        }
        Ok(m)
    }

    /// Independent channel noise with the intensity sigma derived from it.
    pub fn from_channels(sigma_r: f64, sigma_g: f64, sigma_b: f64) -> Result<Self> {
        let m = Self::new(sigma_r, sigma_g, sigma_b, 0.0)?;
        Ok(Self {
            sigma_i: m.independent_intensity_sigma(),
            ..m
        })
    }

    pub fn uniform(sigma: f64) -> Result<Self> {
        Self::from_channels(sigma, sigma, sigma)
    }

    pub fn zero() -> Self {
        Self {
            sigma_r: 0.0,
            sigma_g: 0.0,
            sigma_b: 0.0,
            sigma_i: 0.0,
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        [self.sigma_r, self.sigma_g, self.sigma_b]
    }

    /// Standard deviation of `(R+G+B)/3` for independent channels: `sqrt(sum sigma_c^2) / 3`.
    pub fn independent_intensity_sigma(&self) -> f64 {
        self.rgb().iter().map(|s| s * s).sum::<f64>().sqrt() / 3.0
    }

    /// `sigma_r=..` lines, one per field, as printed by `estimate-noise`.
    pub fn to_key_values(&self) -> String {
        format!(
            "sigma_r={}\nsigma_g={}\nsigma_b={}\nsigma_i={}\n",
            self.sigma_r, self.sigma_g, self.sigma_b, self.sigma_i
        )
    }

    pub fn parse_key_values(text: &str) -> Result<Self> {
        let mut vals = [None; 4];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            let slot = match k.trim() {
                "sigma_r" => 0,
                "sigma_g" => 1,
                "sigma_b" => 2,
                "sigma_i" => 3,
                _ => continue,
            };
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad noise value {v:?} for {k}")))?;
            vals[slot] = Some(v);
        }
        match vals {
            [Some(r), Some(g), Some(b), Some(i)] => Self::new(r, g, b, i),
            _ => Err(Error::Format(
                "noise model needs sigma_r, sigma_g, sigma_b and sigma_i".into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseEstimationParams {
    /// Fraction of interior pixels kept, lowest gradient magnitude first.
    pub structure_fraction: f64,
    /// Fraction discarded at each tail of local intensity and of saturation.
    pub extreme_discard: f64,
    /// Hysteresis thresholds as fractions of the maximum Canny gradient magnitude.
    pub canny_low: f64,
    pub canny_high: f64,
    /// Chebyshev radius excluded around every Canny edge pixel.
    pub edge_exclusion_radius: usize,
}

impl Default for NoiseEstimationParams {
    fn default() -> Self {
        Self {
            structure_fraction: 0.10,
            extreme_discard: 0.05,
            canny_low: 0.55,
            canny_high: 0.75,
            edge_exclusion_radius: 5,
        }
    }
}

impl NoiseEstimationParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.structure_fraction > 0.0
            && self.structure_fraction <= 1.0
            && (0.0..0.5).contains(&self.extreme_discard)
            && self.canny_low >= 0.0
            && self.canny_low < self.canny_high
            && self.canny_high <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise estimation params {self:?}")))
        }
    }
}

/// Pixels selected for noise estimation.
#[derive(Clone, Debug)]
pub struct StructureMask {
    pub width: usize,
    pub height: usize,
    /// Selected pixels, row-major.
    pub selected: Vec<bool>,
    /// Pixels that survived the edge and tail exclusions before ranking.
    pub candidates: Vec<bool>,
    /// Dilated Canny edge map.
    pub edge_zone: Vec<bool>,
}

impl StructureMask {
    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const LAPLACIAN: [[f64; 3]; 3] = [[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]];

#[inline]
fn apply3(plane: &[f64], width: usize, x: usize, y: usize, k: &[[f64; 3]; 3]) -> f64 {
    let mut acc = 0.0;
    for (dy, row) in k.iter().enumerate() {
        let base = (y + dy - 1) * width + x - 1;
        acc += row[0] * plane[base] + row[1] * plane[base + 1] + row[2] * plane[base + 2];
    }
    acc
}

fn plane_f64(map: &FloatMap) -> Vec<f64> {
    map.channel(0).iter().map(|&v| v as f64).collect()
}

/// Sobel gradient magnitude; zero on the one-pixel border.
pub fn sobel_magnitude(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let gx = apply3(plane, width, x, y, &SOBEL_X);
            let gy = apply3(plane, width, x, y, &SOBEL_Y);
            out[y * width + x] = gx.hypot(gy);
        }
    }
    out
}

/// 3x3 box mean; zero on the one-pixel border.
fn local_mean3(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    const BOX: [[f64; 3]; 3] = [[1.0; 3]; 3];
    let mut out = vec![0.0; width * height];
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            out[y * width + x] = apply3(plane, width, x, y, &BOX) / 9.0;
        }
    }
    out
}

/// HSV saturation `(max - min) / max` of the 3x3 local channel means.
pub fn local_saturation(img: &ImageRgb) -> FloatMap {
    let (w, h) = (img.width(), img.height());
    let means: Vec<Vec<f64>> = (0..3)
        .map(|c| local_mean3(&plane_f64(&img.channel(c)), w, h))
        .collect();
    let data = (0..w * h)
        .map(|i| {
            let v = [means[0][i], means[1][i], means[2][i]];
            let max = v.iter().copied().fold(f64::MIN, f64::max);
            let min = v.iter().copied().fold(f64::MAX, f64::min);
            if max > 0.0 {
                ((max - min) / max) as f32
            } else {
                0.0
            }
        })
        .collect();
    FloatMap::from_vec(w, h, 1, data).expect("saturation values are finite")
}

/// Canny edges with hysteresis thresholds relative to the maximum gradient magnitude.
fn canny_edges(plane: &[f64], width: usize, height: usize, low: f64, high: f64) -> Vec<bool> {
    // 3x3 binomial smoothing with replicated borders
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        plane[y * width + x]
    };
    let mut smooth = vec![0.0; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let wgt = [1.0, 2.0, 1.0][(dx + 1) as usize] * [1.0, 2.0, 1.0][(dy + 1) as usize];
                    acc += wgt * at(x + dx, y + dy);
                }
            }
            smooth[y as usize * width + x as usize] = acc / 16.0;
        }
    }

    let mut gx = vec![0.0; width * height];
    let mut gy = vec![0.0; width * height];
    let mut mag = vec![0.0; width * height];
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let i = y * width + x;
            gx[i] = apply3(&smooth, width, x, y, &SOBEL_X);
            gy[i] = apply3(&smooth, width, x, y, &SOBEL_Y);
            mag[i] = gx[i].hypot(gy[i]);
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![false; width * height];
    }

    // non-maximum suppression along the quantized gradient direction
    let mut thin = vec![0.0; width * height];
    for y in 2..height.saturating_sub(2) {
        for x in 2..width.saturating_sub(2) {
            let i = y * width + x;
            if mag[i] <= 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dx, dy): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let fwd = ((y as isize + dy) as usize) * width + (x as isize + dx) as usize;
            let back = ((y as isize - dy) as usize) * width + (x as isize - dx) as usize;
            if mag[i] >= mag[fwd] && mag[i] >= mag[back] {
                thin[i] = mag[i];
            }
        }
    }

    let (lo, hi) = (low * max, high * max);
    let mut edge = vec![false; width * height];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > 0.0 && m >= hi {
            edge[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % width) as isize, (i / width) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if !edge[j] && thin[j] > 0.0 && thin[j] >= lo {
                    edge[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edge
}

/// Marks every pixel within Chebyshev distance `radius` of a set pixel.
fn dilate(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let mut rows = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(width - 1));
                rows[y * width + x0..=y * width + x1].fill(true);
            }
        }
    }
    let mut out = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            if rows[y * width + x] {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(height - 1));
                for yy in y0..=y1 {
                    out[yy * width + x] = true;
                }
            }
        }
    }
    out
}

/// Bounds `[lo, hi]` keeping everything but the `fraction` tails of `values`.
fn tail_bounds(values: &mut [f64], fraction: f64) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let cut = ((fraction * n as f64).floor() as usize).min(n - 1);
    (values[cut], values[n - 1 - cut])
}

/// Selects the low-structure pixels used for noise estimation.
///
/// `saturation`, when given, adds the saturation tail exclusion.
pub fn structure_mask(
    channel: &FloatMap,
    saturation: Option<&FloatMap>,
    params: &NoiseEstimationParams,
) -> Result<StructureMask> {
    params.validate()?;
    let (w, h) = (channel.width(), channel.height());
    if w < 8 || h < 8 {
        return Err(Error::Shape(format!(
            "noise estimation needs at least 8x8 pixels, got {w}x{h}"
        )));
    }
    if let Some(s) = saturation {
        if s.width() != w || s.height() != h {
            return Err(Error::Shape("saturation map size mismatch".into()));
        }
    }
    let plane = plane_f64(channel);
    let interior: Vec<usize> = (1..h - 1)
        .flat_map(|y| (1..w - 1).map(move |x| y * w + x))
        .collect();

    let magnitude = sobel_magnitude(&plane, w, h);
    let edges = canny_edges(&plane, w, h, params.canny_low, params.canny_high);
    let edge_zone = dilate(&edges, w, h, params.edge_exclusion_radius);

    let mean = local_mean3(&plane, w, h);
    let (i_lo, i_hi) = tail_bounds(
        &mut interior.iter().map(|&i| mean[i]).collect::<Vec<_>>(),
        params.extreme_discard,
    );
    let sat_bounds = saturation.map(|s| {
        let sat = s.channel(0);
        let bounds = tail_bounds(
            &mut interior.iter().map(|&i| sat[i] as f64).collect::<Vec<_>>(),
            params.extreme_discard,
        );
        (sat, bounds)
    });

    let mut candidates = vec![false; w * h];
    let mut ranked: Vec<usize> = Vec::new();
    for &i in &interior {
        if edge_zone[i] || mean[i] < i_lo || mean[i] > i_hi {
            continue;
        }
        if let Some((sat, (s_lo, s_hi))) = sat_bounds {
            let s = sat[i] as f64;
            if s < s_lo || s > s_hi {
                continue;
            }
        }
        candidates[i] = true;
        ranked.push(i);
    }
    if ranked.is_empty() {
        return Err(Error::Estimation(
            "no low-structure pixels left after edge and tail exclusion; \
             use a larger image or a smaller edge exclusion radius"
                .into(),
        ));
    }
    // stable sort keeps row-major order among equal magnitudes
    ranked.sort_by(|&a, &b| magnitude[a].total_cmp(&magnitude[b]));
    let target = ((params.structure_fraction * interior.len() as f64).ceil() as usize)
        .clamp(1, ranked.len());
    let mut selected = vec![false; w * h];
    for &i in &ranked[..target] {
        selected[i] = true;
    }
    Ok(StructureMask {
        width: w,
        height: h,
        selected,
        candidates,
        edge_zone,
    })
}

/// Immerkær estimate `sqrt(pi/2) / (6 N) * sum |L * channel|` over the masked pixels.
pub fn estimate_channel_sigma(channel: &FloatMap, mask: &StructureMask) -> Result<f64> {
    let (w, h) = (channel.width(), channel.height());
    if mask.width != w || mask.height != h {
        return Err(Error::Shape("mask does not match channel size".into()));
    }
    let plane = plane_f64(channel);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in mask.indices() {
        let (x, y) = (i % w, i / w);
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            continue;
        }
        sum += apply3(&plane, w, x, y, &LAPLACIAN).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Estimation("empty estimation mask".into()));
    }
    Ok((PI / 2.0).sqrt() * sum / (6.0 * n as f64))
}

/// Estimates the noise model and returns the shared mask used for it.
pub fn estimate_noise_model_with_mask(
    img: &ImageRgb,
    params: &NoiseEstimationParams,
) -> Result<(NoiseModel, StructureMask)> {
    img.require_min_size(8, "noise estimation")?;
    let inten = intensity(img).to_float_map();
    let sat = local_saturation(img);
    let mask = structure_mask(&inten, Some(&sat), params)?;
    let sigma = |c: usize| estimate_channel_sigma(&img.channel(c), &mask);
    let model = NoiseModel::new(
        sigma(0)?,
        sigma(1)?,
        sigma(2)?,
        estimate_channel_sigma(&inten, &mask)?,
    )?;
    Ok((model, mask))
}

pub fn estimate_noise_model(img: &ImageRgb, params: &NoiseEstimationParams) -> Result<NoiseModel> {
    estimate_noise_model_with_mask(img, params).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(w: usize, h: usize, v: f32) -> FloatMap {
        FloatMap::from_vec(w, h, 1, vec![v; w * h]).unwrap()
    }

    #[test]
    fn constant_image_selects_fraction_in_scan_order() {
        let ch = constant(20, 20, 0.4);
        let p = NoiseEstimationParams::default();
        let m = structure_mask(&ch, None, &p).unwrap();
        let interior = 18 * 18;
        let expect = (0.1 * interior as f64).ceil() as usize;
        assert_eq!(m.count(), expect);
        // the first `expect` interior pixels in row-major order
        let first: Vec<usize> = (1..19)
            .flat_map(|y| (1..19).map(move |x| y * 20 + x))
            .take(expect)
            .collect();
        assert_eq!(m.indices().collect::<Vec<_>>(), first);
        assert_eq!(estimate_channel_sigma(&ch, &m).unwrap(), 0.0);
    }

    #[test]
    fn edge_neighbourhood_is_excluded() {
        let (w, h) = (40, 40);
        let data = (0..w * h)
            .map(|i| if i % w < 20 { 0.2 } else { 0.8 })
            .collect();
        let ch = FloatMap::from_vec(w, h, 1, data).unwrap();
        let p = NoiseEstimationParams::default();
        let m = structure_mask(&ch, None, &p).unwrap();
        assert!(m.count() > 0);
        for i in m.indices() {
            let x = (i % w) as isize;
            // the step lies between columns 19 and 20
            assert!(!(19 - 5..=20 + 5).contains(&x), "selected column {x}");
        }
    }

    #[test]
    fn too_small_or_overexcluded_inputs_fail() {
        assert!(matches!(
            structure_mask(&constant(7, 9, 0.1), None, &Default::default()),
            Err(Error::Shape(_))
        ));
        // the global gradient maximum is always an edge; a huge radius leaves nothing
        let (w, h) = (16, 16);
        let data = (0..w * h).map(|i| ((i * 7919) % 101) as f32 / 101.0).collect();
        let ch = FloatMap::from_vec(w, h, 1, data).unwrap();
        let p = NoiseEstimationParams {
            edge_exclusion_radius: 20,
            ..Default::default()
        };
        assert!(matches!(
            structure_mask(&ch, None, &p),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn params_are_validated() {
        let bad = NoiseEstimationParams {
            canny_low: 0.8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseEstimationParams {
            structure_fraction: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseEstimationParams {
            extreme_discard: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noiseless_constant_image_gives_zero_model() {
        let img = ImageRgb::filled(16, 16, [0.3, 0.5, 0.7]).unwrap();
        let m = estimate_noise_model(&img, &Default::default()).unwrap();
        assert_eq!(m, NoiseModel::zero());
    }

    #[test]
    fn key_value_round_trip() {
        let m = NoiseModel::new(0.01, 0.02, 0.030000000000000002, 0.0123).unwrap();
        assert_eq!(NoiseModel::parse_key_values(&m.to_key_values()).unwrap(), m);
        assert!(NoiseModel::parse_key_values("sigma_r=1\n").is_err());
        assert!(NoiseModel::new(-1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn dilation_is_chebyshev() {
        let mut m = vec![false; 9 * 9];
        m[4 * 9 + 4] = true;
        let d = dilate(&m, 9, 9, 2);
        assert_eq!(d.iter().filter(|&&b| b).count(), 25);
        assert!(d[2 * 9 + 2] && d[6 * 9 + 6] && !d[9 + 4]);
    }
}
