//! Synthetic sign-like scenes with exact ground truth, Monte-Carlo oracles for
//! the analytic formulas, calibration metrics and the limited-sample experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lbp::{LbpScale, NeighborSampling};
use crate::nconv::{train_linear, classify, Encoder, EncoderConfig, Hyper};
use crate::noise::NoiseModel;
use crate::pipeline::{process_image, stream_tensor, PipelineConfig, PipelineOutput, StreamKind};
use crate::raster::{intensity, FloatMap, ImageRgb};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    None,
    Circle,
    TriangleUp,
    TriangleDown,
    Square,
}

/// Axis-aligned rectangle drawn inside the shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pictogram {
    pub color: [f32; 3],
    pub half_width: f64,
    pub half_height: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub shape: Shape,
    pub center: (f64, f64),
    /// Circumradius; half the side for squares.
    pub radius: f64,
    pub fill: [f32; 3],
    pub border: [f32; 3],
    /// 0 for no border.
    pub border_width: f64,
    pub background: [f32; 3],
    pub pictogram: Option<Pictogram>,
    pub gains: [f64; 3],
    pub noise: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("empty canvas".into()));
        }
        let colors = [self.fill, self.border, self.background]
            .into_iter()
            .chain(self.pictogram.map(|p| p.color));
        for c in colors {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("color {c:?} outside [0,1]")));
            }
        }
        if self.noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) || self.gains.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::Config("noise and gains must be finite and non-negative".into()));
        }
        if self.shape != Shape::None {
            let (cx, cy) = self.center;
            let r = self.radius;
            if !(r > 0.0) || cx - r < 0.0 || cy - r < 0.0 || cx + r > self.width as f64 || cy + r > self.height as f64 {
                return Err(Error::Config(format!(
                    "shape of radius {r} at ({cx}, {cy}) does not fit a {}x{} canvas",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Background,
    Border,
    Fill,
    Glyph,
}

fn inside_triangle(px: f64, py: f64, cx: f64, cy: f64, r: f64, up: bool) -> bool {
    if r <= 0.0 {
        return false;
    }
    // flip so the apex always points to -y
    let dy = if up { py - cy } else { cy - py };
    let dx = px - cx;
    // base at dy = r/2, apex at dy = -r; the sides have slope sqrt(3)
    dy <= r / 2.0 && (3f64.sqrt() * dx.abs() + dy) <= r
}

fn inside(shape: Shape, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
    match shape {
        Shape::None => false,
        Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
        Shape::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
        Shape::TriangleUp => inside_triangle(px, py, cx, cy, r, true),
        Shape::TriangleDown => inside_triangle(px, py, cx, cy, r, false),
    }
}

fn region(spec: &SceneSpec, x: usize, y: usize) -> Region {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let (cx, cy) = spec.center;
    if !inside(spec.shape, px, py, cx, cy, spec.radius) {
        return Region::Background;
    }
    // the inner outline of a triangle's border shrinks the circumradius by twice the width
    let inner_r = match spec.shape {
        Shape::TriangleUp | Shape::TriangleDown => spec.radius - 2.0 * spec.border_width,
        _ => spec.radius - spec.border_width,
    };
    if spec.border_width > 0.0 && !inside(spec.shape, px, py, cx, cy, inner_r) {
        return Region::Border;
    }
    if let Some(p) = spec.pictogram {
        if (px - cx).abs() <= p.half_width && (py - cy).abs() <= p.half_height {
            return Region::Glyph;
        }
    }
    Region::Fill
}

/// Exact per-pixel truth, derived from the render before gains and noise.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub label: Option<usize>,
    pub clean: ImageRgb,
    /// True where the clean pixel is gray.
    pub rg_h0: Vec<bool>,
    /// True where the 3x3 neighbourhood mixes gray and non-gray pixels.
    pub rg_boundary: Vec<bool>,
}

impl GroundTruth {
    /// Homogeneity mask at one scale (true: all neighbour differences are zero)
    /// and the validity mask of that scale.
    pub fn lbp_h0(&self, scale: LbpScale, sampling: NeighborSampling) -> (Vec<bool>, Vec<bool>) {
        let map = intensity(&self.clean);
        let n = self.width * self.height;
        let mut h0 = vec![false; n];
        let mut valid = vec![false; n];
        let sampler = crate::lbp::LbpSampler::new(scale, sampling);
        let mut z = vec![0.0; scale.points];
        for y in 0..self.height {
            for x in 0..self.width {
                if sampler.neighbors_into(&map, x, y, &mut z) {
                    let i = y * self.width + x;
                    valid[i] = true;
                    h0[i] = z.iter().all(|&v| v == 0.0);
                }
            }
        }
        (h0, valid)
    }

    /// `1` for null-hypothesis pixels, `0` otherwise.
    pub fn rg_mask_map(&self) -> FloatMap {
        mask_map(self.width, self.height, &[&self.rg_h0])
    }

    /// One channel per scale; pixels outside a scale's valid region are 0.
    pub fn lbp_mask_map(&self, scales: &[LbpScale]) -> FloatMap {
        let masks: Vec<Vec<bool>> = scales
            .iter()
            .map(|&s| {
                let (h0, valid) = self.lbp_h0(s, NeighborSampling::Nearest);
                h0.iter().zip(&valid).map(|(a, b)| *a && *b).collect()
            })
            .collect();
        let refs: Vec<&Vec<bool>> = masks.iter().collect();
        mask_map(self.width, self.height, &refs)
    }
}

fn mask_map(w: usize, h: usize, masks: &[&Vec<bool>]) -> FloatMap {
    let data = masks
        .iter()
        .flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    FloatMap::from_vec(w, h, masks.len(), data).expect("finite mask")
}

fn is_gray(p: [f32; 3]) -> bool {
    p[0] == p[1] && p[1] == p[2]
}

/// Hard-edged render, then channel gains (clamped), then i.i.d. Gaussian noise (clamped).
pub fn render_scene(spec: &SceneSpec) -> Result<(ImageRgb, GroundTruth)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let clean = ImageRgb::from_fn(w, h, |x, y| match region(spec, x, y) {
        Region::Background => spec.background,
        Region::Border => spec.border,
        Region::Fill => spec.fill,
        Region::Glyph => spec.pictogram.map_or(spec.fill, |p| p.color),
    })?;
    let rg_h0: Vec<bool> = clean.pixels().iter().map(|&p| is_gray(p)).collect();
    let mut rg_boundary = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let me = rg_h0[y * w + x];
            'n: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h && rg_h0[yy as usize * w + xx as usize] != me {
                        rg_boundary[y * w + x] = true;
                        break 'n;
                    }
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normals: Vec<Normal<f64>> = spec
        .noise
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("validated sigma"))
        .collect();
    let data = clean
        .pixels()
        .iter()
        .map(|p| {
            let mut out = [0f32; 3];
            for c in 0..3 {
                let lit = (p[c] as f64 * spec.gains[c]).min(1.0);
                let noisy = lit + normals[c].sample(&mut rng);
                out[c] = noisy.clamp(0.0, 1.0) as f32;
            }
            out
        })
        .collect();
    let image = ImageRgb::new(w, h, data)?;
    Ok((
        image,
        GroundTruth {
            width: w,
            height: h,
            label: None,
            clean,
            rg_h0,
            rg_boundary,
        },
    ))
}

/// The seven synthetic classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignClass {
    RedRingCircle,
    RedFilledCircle,
    BlueCircle,
    RedTriangleUp,
    RedTriangleDown,
    GrayCircle,
    YellowSquare,
}

impl SignClass {
    pub const ALL: [SignClass; 7] = [
        SignClass::RedRingCircle,
        SignClass::RedFilledCircle,
        SignClass::BlueCircle,
        SignClass::RedTriangleUp,
        SignClass::RedTriangleDown,
        SignClass::GrayCircle,
        SignClass::YellowSquare,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RedRingCircle => "red_ring_circle",
            Self::RedFilledCircle => "red_filled_circle",
            Self::BlueCircle => "blue_circle",
            Self::RedTriangleUp => "red_triangle_up",
            Self::RedTriangleDown => "red_triangle_down",
            Self::GrayCircle => "gray_circle",
            Self::YellowSquare => "yellow_square",
        }
    }
}

const RED: [f32; 3] = [0.75, 0.12, 0.12];
const WHITE: [f32; 3] = [0.8, 0.8, 0.8];
const DARK: [f32; 3] = [0.15, 0.15, 0.15];

/// Ranges of the per-sample nuisance factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    pub canvas: usize,
    pub brightness: (f64, f64),
    pub gain_spread: f64,
    pub sigma: (f64, f64),
    pub jitter: f64,
    pub radius: (f64, f64),
    pub background: (f64, f64),
}

impl Default for Nuisance {
    fn default() -> Self {
        Self {
            canvas: 48,
            brightness: (0.6, 1.1),
            gain_spread: 0.08,
            sigma: (0.01, 0.03),
            jitter: 3.0,
            radius: (14.0, 18.0),
            background: (0.3, 0.6),
        }
    }
}

fn scale_color(c: [f32; 3], b: f64) -> [f32; 3] {
    c.map(|v| (v as f64 * b).min(1.0) as f32)
}

/// Scene for one class with nuisances drawn from `rng`.
pub fn class_scene(class: SignClass, nuisance: &Nuisance, rng: &mut impl Rng) -> SceneSpec {
    let n = nuisance;
    let b = rng.random_range(n.brightness.0..=n.brightness.1);
    let gains = [0; 3].map(|_| 1.0 + rng.random_range(-n.gain_spread..=n.gain_spread));
    let sigma = rng.random_range(n.sigma.0..=n.sigma.1);
    let radius = rng.random_range(n.radius.0..=n.radius.1);
    let half = n.canvas as f64 / 2.0;
    let slack = (half - radius).max(0.0).min(n.jitter);
    let center = (
        half + rng.random_range(-slack..=slack),
        half + rng.random_range(-slack..=slack),
    );
    let bg = rng.random_range(n.background.0..=n.background.1) as f32;
    let bar = |color, hw: f64, hh: f64| {
        Some(Pictogram {
            color,
            half_width: hw * radius,
            half_height: hh * radius,
        })
    };
    let (shape, fill, border, bw, pictogram) = match class {
        SignClass::RedRingCircle => (Shape::Circle, WHITE, RED, 0.22 * radius, bar(DARK, 0.35, 0.2)),
        SignClass::RedFilledCircle => (Shape::Circle, RED, RED, 0.0, bar(WHITE, 0.55, 0.12)),
        SignClass::BlueCircle => (Shape::Circle, [0.1, 0.25, 0.7], WHITE, 0.08 * radius, bar(WHITE, 0.12, 0.5)),
        SignClass::RedTriangleUp => (Shape::TriangleUp, WHITE, RED, 0.14 * radius, None),
        SignClass::RedTriangleDown => (Shape::TriangleDown, WHITE, RED, 0.14 * radius, None),
        SignClass::GrayCircle => (Shape::Circle, [0.75, 0.75, 0.75], DARK, 0.06 * radius, None),
        SignClass::YellowSquare => (Shape::Square, [0.8, 0.65, 0.08], WHITE, 0.12 * radius, None),
    };
    let square_scale = if shape == Shape::Square { 0.75 } else { 1.0 };
    SceneSpec {
        width: n.canvas,
        height: n.canvas,
        shape,
        center,
        radius: radius * square_scale,
        fill: scale_color(fill, b),
        border: scale_color(border, b),
        border_width: bw * square_scale,
        background: scale_color([bg; 3], b),
        pictogram: pictogram.map(|p| Pictogram {
            color: scale_color(p.color, b),
            ..p
        }),
        gains,
        noise: [sigma; 3],
        seed: rng.random(),
    }
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut rng_seed = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        rng_seed = (rng_seed ^ p).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        rng_seed ^= rng_seed >> 31;
    }
    rng_seed
}

/// Sample `index` of `class` for `seed`; indices identify disjoint draws.
pub fn class_sample(class: SignClass, nuisance: &Nuisance, seed: u64, index: u64) -> Result<(ImageRgb, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, class.index() as u64, index]));
    let spec = class_scene(class, nuisance, &mut rng);
    let (img, mut gt) = render_scene(&spec)?;
    gt.label = Some(class.index());
    Ok((img, gt))
}

/// Red circle on mid gray, 64x64, no illuminant cast.
pub fn red_circle_fixture(sigma: f64, seed: u64) -> SceneSpec {
    SceneSpec {
        width: 64,
        height: 64,
        shape: Shape::Circle,
        center: (32.0, 32.0),
        radius: 18.0,
        fill: [0.8, 0.15, 0.15],
        border: [0.8, 0.15, 0.15],
        border_width: 0.0,
        background: [0.5, 0.5, 0.5],
        pictogram: None,
        gains: [1.0; 3],
        noise: [sigma; 3],
        seed,
    }
}

pub fn pure_gray_fixture(level: f32, sigma: f64, seed: u64) -> SceneSpec {
    SceneSpec {
        shape: Shape::None,
        background: [level; 3],
        ..red_circle_fixture(sigma, seed)
    }
}

const MC_CHUNK: usize = 1 << 16;

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(MC_CHUNK))
        .map(|i| (i, MC_CHUNK.min(n - i * MC_CHUNK)))
        .collect()
}

/// Sample covariance of `(r, g)` over `n` noisy copies of one pixel.
pub fn mc_oracle_rg_cov(rgb: [f64; 3], noise: &NoiseModel, n: usize, seed: u64) -> Result<[[f64; 2]; 2]> {
    if n < 100_000 {
        return Err(Error::Config(format!("{n} draws; the oracle needs at least 1e5")));
    }
    let s0: f64 = rgb.iter().sum();
    if !(s0 > 0.0) {
        return Err(Error::Value("pixel sum must be positive".into()));
    }
    let (r0, g0) = (rgb[0] / s0, rgb[1] / s0);
    let sig = noise.rgb();
    // sums of dr, dg, dr^2, dg^2, dr*dg with deviations from the noiseless point
    let sums = chunks(n)
        .into_par_iter()
        .map(|(i, m)| {
            let mut rng = chunk_rng(seed, i);
            let mut acc = [0.0f64; 5];
            for _ in 0..m {
                let mut v = rgb;
                for c in 0..3 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v[c] += sig[c] * e;
                }
                let s = v[0] + v[1] + v[2];
                let (dr, dg) = (v[0] / s - r0, v[1] / s - g0);
                acc[0] += dr;
                acc[1] += dg;
                acc[2] += dr * dr;
                acc[3] += dg * dg;
                acc[4] += dr * dg;
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold([0.0; 5], |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        });
    let nf = n as f64;
    let (mr, mg) = (sums[0] / nf, sums[1] / nf);
    let vr = sums[2] / nf - mr * mr;
    let vg = sums[3] / nf - mg * mg;
    let crg = sums[4] / nf - mr * mg;
    Ok([[vr, crg], [crg, vg]])
}

#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Self) -> Self {
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Self {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }
}

/// Draw from a noncentral chi-square as `|g + sqrt(lambda) e1|^2`.
pub fn noncentral_chi2_draw(k: usize, lambda: f64, rng: &mut impl Rng) -> f64 {
    let mut s = 0.0;
    for i in 0..k {
        let g: f64 = StandardNormal.sample(rng);
        let v = if i == 0 { g + lambda.sqrt() } else { g };
        s += v * v;
    }
    s
}

/// Sample mean and variance of the noncentral chi-square mixture with `lambda ~ U[l1, l2]`.
pub fn mc_oracle_mixture(k: usize, l1: f64, l2: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    if n < 1_000_000 {
        return Err(Error::Config(format!("{n} draws; the oracle needs at least 1e6")));
    }
    if k == 0 || !(0.0 <= l1 && l1 <= l2) {
        return Err(Error::Config(format!("k={k}, range [{l1}, {l2}]")));
    }
    let m = mc_mixture_samples_moments(k, l1, l2, n, seed);
    Ok((m.mean, m.m2 / m.n))
}

fn mc_mixture_samples_moments(k: usize, l1: f64, l2: f64, n: usize, seed: u64) -> Moments {
    chunks(n)
        .into_par_iter()
        .map(|(i, m)| {
            let mut rng = chunk_rng(seed, i);
            let mut acc = Moments::default();
            for _ in 0..m {
                let lambda = if l2 > l1 { rng.random_range(l1..l2) } else { l1 };
                acc.push(noncentral_chi2_draw(k, lambda, &mut rng));
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Moments::default(), Moments::merge)
}

/// `n` draws from the mixture, for distribution-level comparisons.
pub fn mc_mixture_samples(k: usize, l1: f64, l2: f64, n: usize, seed: u64) -> Vec<f64> {
    chunks(n)
        .into_par_iter()
        .flat_map_iter(|(i, m)| {
            let mut rng = chunk_rng(seed, i);
            (0..m)
                .map(|_| {
                    let lambda = if l2 > l1 { rng.random_range(l1..l2) } else { l1 };
                    noncentral_chi2_draw(k, lambda, &mut rng)
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    })
}

/// Asymptotic p-value of the KS statistic `d` for `n` samples.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Area under the ROC curve of `score` for `positive`, ties counted half; `None` without both classes.
pub fn auc(score: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..score.len()).collect();
    idx.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let (mut rank_sum, mut n_pos) = (0.0, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && score[idx[j + 1]] == score[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += avg;
                n_pos += 1;
            }
        }
        i = j + 1;
    }
    let n_neg = score.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    /// AUC of confidence predicting "not null"; absent when one class is missing.
    pub auc: Option<f64>,
    pub mean_conf_h0: Option<f64>,
    pub mean_conf_not_h0: Option<f64>,
    /// Fraction of null pixels with confidence above 0.5.
    pub false_positive_rate: Option<f64>,
    pub pixels: usize,
}

/// Report over pixels where `include` holds.
pub fn calibration_report(conf: &[f32], h0: &[bool], include: &[bool]) -> Result<CalibrationReport> {
    if conf.len() != h0.len() || conf.len() != include.len() {
        return Err(Error::Shape("confidence and truth masks differ in size".into()));
    }
    let (mut score, mut pos) = (Vec::new(), Vec::new());
    let (mut s0, mut n0, mut s1, mut n1, mut fp) = (0.0, 0usize, 0.0, 0usize, 0usize);
    for i in 0..conf.len() {
        if !include[i] {
            continue;
        }
        let c = conf[i] as f64;
        score.push(c);
        pos.push(!h0[i]);
        if h0[i] {
            s0 += c;
            n0 += 1;
            if c > 0.5 {
                fp += 1;
            }
        } else {
            s1 += c;
            n1 += 1;
        }
    }
    Ok(CalibrationReport {
        auc: auc(&score, &pos),
        mean_conf_h0: (n0 > 0).then(|| s0 / n0 as f64),
        mean_conf_not_h0: (n1 > 0).then(|| s1 / n1 as f64),
        false_positive_rate: (n0 > 0).then(|| fp as f64 / n0 as f64),
        pixels: score.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamCalibration {
    pub stream: String,
    pub report: CalibrationReport,
}

/// Reports for every stream of a pipeline run against scene truth.
///
/// rg excludes pixels next to a gray/non-gray boundary; each LBP scale is
/// scored on its own valid region.
pub fn calibrate_output(out: &PipelineOutput, truth: &GroundTruth, cfg: &PipelineConfig) -> Result<Vec<StreamCalibration>> {
    let mut reports = Vec::new();
    for s in &out.streams {
        match s.kind {
            StreamKind::Rg => {
                let include: Vec<bool> = truth.rg_boundary.iter().map(|b| !b).collect();
                reports.push(StreamCalibration {
                    stream: "rg".into(),
                    report: calibration_report(s.confidence.channel(0), &truth.rg_h0, &include)?,
                });
            }
            StreamKind::Lbp => {
                for (i, &scale) in cfg.lbp_scales.iter().enumerate() {
                    let (h0, valid) = truth.lbp_h0(scale, cfg.lbp_sampling);
                    reports.push(StreamCalibration {
                        stream: format!("lbp.{}:{}", scale.radius, scale.points),
                        report: calibration_report(s.confidence.channel(i), &h0, &valid)?,
                    });
                }
            }
            StreamKind::Raw => {}
        }
    }
    Ok(reports)
}

/// Renders a scene, runs the pipeline on it and scores the confidence maps.
pub fn scene_calibration(spec: &SceneSpec, cfg: &PipelineConfig) -> Result<Vec<StreamCalibration>> {
    let (img, truth) = render_scene(spec)?;
    let out = process_image(&img, cfg, None)?;
    calibrate_output(&out, &truth, cfg)
}

/// One arm of the experiment: which streams, with or without confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub streams: Vec<StreamKind>,
    pub confidence: bool,
}

impl Arm {
    pub fn label(&self) -> String {
        self.streams.iter().map(|s| s.name()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub samples_per_class: Vec<usize>,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub test_per_class: usize,
    pub nuisance: Nuisance,
    pub hyper: Hyper,
    pub encoder: EncoderConfig,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            samples_per_class: vec![5, 10, 50, 100],
            arms: vec![
                Arm {
                    streams: vec![StreamKind::Rg, StreamKind::Lbp],
                    confidence: true,
                },
                Arm {
                    streams: vec![StreamKind::Rg, StreamKind::Lbp],
                    confidence: false,
                },
                Arm {
                    streams: vec![StreamKind::Raw],
                    confidence: false,
                },
            ],
            seeds: vec![0, 1, 2, 3, 4],
            test_per_class: 30,
            nuisance: Nuisance::default(),
            hyper: Hyper::default(),
            encoder: EncoderConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class.is_empty() || self.samples_per_class.contains(&0) {
            return Err(Error::Config("samples per class must be at least 1".into()));
        }
        if self.arms.is_empty() || self.arms.iter().any(|a| a.streams.is_empty()) {
            return Err(Error::Config("every arm needs at least one stream".into()));
        }
        if self.seeds.is_empty() || self.test_per_class == 0 {
            return Err(Error::Config("need at least one seed and one test sample per class".into()));
        }
        self.pipeline.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub arm: String,
    pub confidence: bool,
    pub samples: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub accuracies: Vec<f64>,
}

/// Encoded blocks for one image, keyed by (stream, confidence).
type Blocks = Vec<((StreamKind, bool), Vec<f64>)>;

fn image_blocks(img: &ImageRgb, cfg: &ExperimentConfig, encoders: &[(StreamKind, Encoder)], needed: &[(StreamKind, bool)]) -> Result<Blocks> {
    let mut pcfg = cfg.pipeline.clone();
    pcfg.streams = encoders.iter().map(|(k, _)| *k).collect();
    let out = process_image(img, &pcfg, None)?;
    needed
        .iter()
        .map(|&(kind, conf)| {
            let s = out.stream(kind).expect("stream was processed");
            let enc = &encoders.iter().find(|(k, _)| *k == kind).expect("encoder").1;
            let e = enc.encode(&[stream_tensor(s, conf)?])?;
            Ok(((kind, conf), e.features))
        })
        .collect()
}

fn arm_features(blocks: &Blocks, arm: &Arm) -> Vec<f64> {
    arm.streams
        .iter()
        .flat_map(|&k| {
            blocks
                .iter()
                .find(|(key, _)| *key == (k, arm.confidence))
                .expect("block computed")
                .1
                .clone()
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Test accuracy per arm and training-set size, over seeds.
///
/// Each seed draws its own train and test scenes; smaller training sets are
/// prefixes of larger ones.
pub fn limited_sample_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>> {
    cfg.validate()?;
    let mut kinds: Vec<StreamKind> = cfg.arms.iter().flat_map(|a| a.streams.clone()).collect();
    kinds.sort();
    kinds.dedup();
    let mut needed: Vec<(StreamKind, bool)> = cfg
        .arms
        .iter()
        .flat_map(|a| a.streams.iter().map(move |&s| (s, a.confidence)))
        .collect();
    needed.sort();
    needed.dedup();
    let encoders: Vec<(StreamKind, Encoder)> = kinds
        .iter()
        .map(|&k| {
            let mut p = cfg.pipeline.clone();
            p.streams = vec![k];
            p.encoder = cfg.encoder;
            Ok((k, p.build_encoder()?))
        })
        .collect::<Result<_>>()?;
    let max_train = *cfg.samples_per_class.iter().max().expect("validated");
    let classes = SignClass::ALL.len();

    let mut acc = vec![vec![Vec::new(); cfg.samples_per_class.len()]; cfg.arms.len()];
    for &seed in &cfg.seeds {
        let jobs: Vec<(SignClass, u64)> = SignClass::ALL
            .iter()
            .flat_map(|&c| (0..(max_train + cfg.test_per_class) as u64).map(move |i| (c, i)))
            .collect();
        let blocks: Vec<Blocks> = jobs
            .par_iter()
            .map(|&(c, i)| {
                let (img, _) = class_sample(c, &cfg.nuisance, seed, i)?;
                image_blocks(&img, cfg, &encoders, &needed)
            })
            .collect::<Result<_>>()?;
        let per_class = max_train + cfg.test_per_class;
        let at = |c: usize, i: usize| &blocks[c * per_class + i];

        for (a, arm) in cfg.arms.iter().enumerate() {
            let (test_x, test_y): (Vec<Vec<f64>>, Vec<usize>) = (0..classes)
                .flat_map(|c| (max_train..per_class).map(move |i| (c, i)))
                .map(|(c, i)| (arm_features(at(c, i), arm), c))
                .unzip();
            for (s, &samples) in cfg.samples_per_class.iter().enumerate() {
                let (train_x, train_y): (Vec<Vec<f64>>, Vec<usize>) = (0..classes)
                    .flat_map(|c| (0..samples).map(move |i| (c, i)))
                    .map(|(c, i)| (arm_features(at(c, i), arm), c))
                    .unzip();
                let hyper = Hyper { seed, ..cfg.hyper };
                let model = train_linear(&train_x, &train_y, &hyper)?.model;
                let correct = test_x
                    .iter()
                    .zip(&test_y)
                    .map(|(x, &y)| classify(&model, x).map(|(p, _)| (p == y) as usize))
                    .sum::<Result<usize>>()?;
                acc[a][s].push(correct as f64 / test_y.len() as f64);
            }
        }
    }

    let mut rows = Vec::new();
    for (a, arm) in cfg.arms.iter().enumerate() {
        for (s, &samples) in cfg.samples_per_class.iter().enumerate() {
            let (mean_acc, std_acc) = mean_std(&acc[a][s]);
            rows.push(ExperimentRow {
                arm: arm.label(),
                confidence: arm.confidence,
                samples,
                mean_acc,
                std_acc,
                accuracies: acc[a][s].clone(),
            });
        }
    }
    Ok(rows)
}

/// TSV with header `stream\tconf\tsamples\tmean_acc\tstd_acc`.
pub fn experiment_table_tsv(rows: &[ExperimentRow]) -> String {
    let mut s = String::from("stream\tconf\tsamples\tmean_acc\tstd_acc\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\n",
            r.arm,
            if r.confidence { "on" } else { "off" },
            r.samples,
            r.mean_acc,
            r.std_acc
        ));
    }
    s
}
