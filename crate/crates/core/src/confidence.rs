//! Posterior confidence from squared Mahalanobis distances.
//!
//! Under a hypothesis the distance `d^2` follows a noncentral chi-square with
//! `k` degrees of freedom whose noncentrality `lambda` is uniform on
//! `[lambda_lo, lambda_hi]`. The mixture is replaced by the Gaussian with the
//! same mean and variance,
//!
//! ```text
//! mean = k + (l1 + l2) / 2
//! var  = 2k + 2(l1 + l2) + (l2 - l1)^2 / 12
//! ```
//!
//! and the confidence is the posterior of "not null" given the observed
//! distance. Several split points between the two noncentrality ranges are
//! evaluated per image and the resulting maps are averaged.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lbp::LbpScale;
use crate::raster::FloatMap;

/// Floor applied by [`likelihood`].
pub const LIKELIHOOD_FLOOR: f64 = 1e-300;
/// Fixed split points; the adaptive one is added per image.
pub const FIXED_SPLITS: [f64; 3] = [0.0, 100.0, 1000.0];
pub const MEDIAN_SPLIT_FACTOR: f64 = 0.5;
pub const MEDIAN_TOP_FACTOR: f64 = 1.75;

/// One hypothesis: `k` dimensions, noncentrality range, prior probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypothesisSpec {
    pub k: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub prior: f64,
}

impl HypothesisSpec {
    pub fn new(k: usize, lambda_lo: f64, lambda_hi: f64, prior: f64) -> Result<Self> {
        let s = Self {
            k,
            lambda_lo,
            lambda_hi,
            prior,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("hypothesis needs k >= 1".into()));
        }
        if !(self.lambda_lo >= 0.0 && self.lambda_lo <= self.lambda_hi && self.lambda_hi.is_finite()) {
            return Err(Error::Config(format!(
                "noncentrality range [{}, {}] is invalid",
                self.lambda_lo, self.lambda_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.prior) {
            return Err(Error::Config(format!("prior {} outside [0,1]", self.prior)));
        }
        Ok(())
    }

    pub fn moments(&self) -> (f64, f64) {
        mixture_moments(self.k, self.lambda_lo, self.lambda_hi)
    }
}

/// Mean and variance of the noncentral chi-square mixture with `lambda ~ U[l1, l2]`.
pub fn mixture_moments(k: usize, l1: f64, l2: f64) -> (f64, f64) {
    let k = k as f64;
    let mean = k + (l1 + l2) / 2.0;
    let var = 2.0 * k + 2.0 * (l1 + l2) + (l2 - l1) * (l2 - l1) / 12.0;
    (mean, var)
}

fn log_density(d2: f64, spec: &HypothesisSpec) -> f64 {
    let (mean, var) = spec.moments();
    let t = d2 - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - t * t / (2.0 * var)
}

/// Gaussian approximation of the mixture density at `d2`, floored at [`LIKELIHOOD_FLOOR`].
pub fn likelihood(d2: f64, spec: &HypothesisSpec) -> f64 {
    log_density(d2, spec).exp().max(LIKELIHOOD_FLOOR)
}

/// `P(not H0 | d2)` with `P(not H0) = 1 - h0.prior`; `h1.prior` is not read.
///
/// Evaluated from log densities, so it stays defined where both densities
/// underflow; the prior of "not null" is returned only when `d2` is not finite.
pub fn posterior_confidence(d2: f64, h0: &HypothesisSpec, h1: &HypothesisSpec) -> f64 {
    let p0 = h0.prior;
    if p0 >= 1.0 {
        return 0.0;
    }
    if p0 <= 0.0 {
        return 1.0;
    }
    let a = log_density(d2, h0) + p0.ln();
    let b = log_density(d2, h1) + (1.0 - p0).ln();
    let diff = a - b;
    if diff.is_nan() {
        return 1.0 - p0;
    }
    (1.0 / (1.0 + diff.exp())).clamp(0.0, 1.0)
}

/// Which statistic the adaptive split is taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MedianOf {
    #[default]
    SquaredDistance,
    Distance,
}

impl std::str::FromStr for MedianOf {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d2" => Ok(Self::SquaredDistance),
            "d" => Ok(Self::Distance),
            _ => Err(Error::Config(format!("median source {s:?} is not d2 or d"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSchedule {
    /// Ascending, without duplicates.
    pub split_values: Vec<f64>,
    pub lambda_top: f64,
    /// Median the adaptive terms were derived from.
    pub median: f64,
}

impl LambdaSchedule {
    /// Schedule from explicit splits, applying the same top floor as [`lambda_schedule`].
    pub fn from_parts(splits: &[f64], median: f64, k: usize) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::Schedule("no split values".into()));
        }
        if splits.iter().any(|s| !(*s >= 0.0 && s.is_finite())) || !(median >= 0.0 && median.is_finite()) {
            return Err(Error::Schedule("split values must be finite and non-negative".into()));
        }
        let mut split_values = splits.to_vec();
        split_values.sort_by(f64::total_cmp);
        split_values.dedup();
        let max_split = *split_values.last().expect("non-empty");
        let lambda_top = (MEDIAN_TOP_FACTOR * median)
            .max(max_split + k as f64 + 1.0)
            .max(2.0 * max_split);
        Ok(Self {
            split_values,
            lambda_top,
            median,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.split_values.is_empty()
            && self.split_values.iter().all(|s| *s >= 0.0 && s.is_finite())
            && self.split_values.windows(2).all(|w| w[0] < w[1])
            && self.lambda_top > *self.split_values.last().unwrap_or(&f64::INFINITY);
        if ok {
            Ok(())
        } else {
            Err(Error::Schedule(format!("invalid schedule {self:?}")))
        }
    }

    /// Null and alternative hypotheses for one split.
    pub fn hypotheses(&self, split: f64, k: usize, prior: f64) -> (HypothesisSpec, HypothesisSpec) {
        (
            HypothesisSpec {
                k,
                lambda_lo: 0.0,
                lambda_hi: split,
                prior,
            },
            HypothesisSpec {
                k,
                lambda_lo: split,
                lambda_hi: self.lambda_top,
                prior: 1.0 - prior,
            },
        )
    }
}

/// Median of the valid entries (mean of the middle pair for even counts).
pub fn median_of_valid(values: &[f32], valid: &[bool]) -> Option<f64> {
    let mut v: Vec<f64> = values
        .iter()
        .zip(valid)
        .filter(|(_, ok)| **ok)
        .map(|(x, _)| *x as f64)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// One entry of a split list: a fixed value or half the image median.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    Fixed(f64),
    Auto,
}

impl SplitSpec {
    pub fn default_list() -> Vec<Self> {
        let mut v: Vec<Self> = FIXED_SPLITS.iter().map(|&s| Self::Fixed(s)).collect();
        v.push(Self::Auto);
        v
    }

    /// Parses `"0,100,1000,auto"`.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        let v: Vec<Self> = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "auto" => Ok(Self::Auto),
                _ => match s.parse::<f64>() {
                    Ok(x) if x >= 0.0 && x.is_finite() => Ok(Self::Fixed(x)),
                    _ => Err(Error::Config(format!("bad split value {s:?}"))),
                },
            })
            .collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(Error::Config("empty split list".into()));
        }
        Ok(v)
    }
}

/// Splits `{0, 100, 1000, median/2}` and top `max(1.75 median, max split + k + 1, 2 max split)`.
///
/// The last floor keeps the alternative's variance at least the null's for
/// every split, which is what makes the posterior monotone in `d2`.
pub fn lambda_schedule(d2: &[f32], valid: &[bool], k: usize, median_of: MedianOf) -> Result<LambdaSchedule> {
    lambda_schedule_with(d2, valid, k, &SplitSpec::default_list(), median_of)
}

pub fn lambda_schedule_with(
    d2: &[f32],
    valid: &[bool],
    k: usize,
    splits: &[SplitSpec],
    median_of: MedianOf,
) -> Result<LambdaSchedule> {
    if d2.len() != valid.len() {
        return Err(Error::Shape("distance map and validity mask differ in length".into()));
    }
    let median = match median_of {
        MedianOf::SquaredDistance => median_of_valid(d2, valid),
        MedianOf::Distance => {
            let d: Vec<f32> = d2.iter().map(|v| v.max(0.0).sqrt()).collect();
            median_of_valid(&d, valid)
        }
    }
    .ok_or_else(|| Error::Schedule("no valid pixels to take a median from".into()))?;
    let values: Vec<f64> = splits
        .iter()
        .map(|s| match s {
            SplitSpec::Fixed(v) => *v,
            SplitSpec::Auto => MEDIAN_SPLIT_FACTOR * median,
        })
        .collect();
    LambdaSchedule::from_parts(&values, median, k)
}

/// One confidence channel with its validity mask.
#[derive(Clone, Debug)]
pub struct ConfidenceMap {
    pub map: FloatMap,
    pub valid: Vec<bool>,
}

impl ConfidenceMap {
    pub fn mean_over(&self, mask: &[bool]) -> Option<f64> {
        let (s, n) = self
            .map
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + *v as f64, n + 1));
        (n > 0).then(|| s / n as f64)
    }
}

/// Mean over the schedule's splits of the per-split posterior confidence.
pub fn pixel_confidence(d2: f64, k: usize, prior: f64, schedule: &LambdaSchedule) -> f64 {
    let total: f64 = schedule
        .split_values
        .iter()
        .map(|&s| {
            let (h0, h1) = schedule.hypotheses(s, k, prior);
            posterior_confidence(d2, &h0, &h1)
        })
        .sum();
    (total / schedule.split_values.len() as f64).clamp(0.0, 1.0)
}

/// Confidence for a single-channel distance map; invalid pixels get 0.
pub fn confidence_map(
    d2: &FloatMap,
    valid: &[bool],
    k: usize,
    prior: f64,
    schedule: &LambdaSchedule,
) -> Result<ConfidenceMap> {
    if d2.channels() != 1 {
        return Err(Error::Shape(format!("expected 1 distance channel, got {}", d2.channels())));
    }
    if valid.len() != d2.plane_len() {
        return Err(Error::Shape("validity mask does not match the distance map".into()));
    }
    if k == 0 || !(0.0..=1.0).contains(&prior) {
        return Err(Error::Config(format!("k={k}, prior={prior}")));
    }
    schedule.validate()?;
    let data: Vec<f32> = d2
        .data()
        .par_iter()
        .zip(valid.par_iter())
        .map(|(&v, &ok)| {
            if ok {
                pixel_confidence(v as f64, k, prior, schedule) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(ConfidenceMap {
        map: FloatMap::from_vec(d2.width(), d2.height(), 1, data)?,
        valid: valid.to_vec(),
    })
}

/// Operator stream identity used to look up priors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operator {
    Rg,
    Lbp(LbpScale),
    Raw,
}

/// Prior `P(H0)` per operator; 0.5 when no estimate is tabulated.
pub fn operator_prior(op: Operator) -> f64 {
    match op {
        Operator::Rg => 0.472,
        Operator::Lbp(LbpScale { radius: 1, points: 8 }) => 0.5445,
        Operator::Lbp(LbpScale { radius: 3, points: 24 }) => 0.522,
        Operator::Lbp(LbpScale { radius: 5, points: 40 }) => 0.5036,
        _ => 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(k: usize, lo: f64, hi: f64, prior: f64) -> HypothesisSpec {
        HypothesisSpec::new(k, lo, hi, prior).unwrap()
    }

    #[test]
    fn moments_examples() {
        assert_eq!(mixture_moments(2, 0.0, 0.0), (2.0, 4.0));
        let (m, v) = mixture_moments(8, 0.0, 100.0);
        assert_eq!(m, 58.0);
        assert!((v - (216.0 + 10000.0 / 12.0)).abs() < 1e-9);
        assert_eq!(mixture_moments(2, 50.0, 50.0), (52.0, 204.0));
    }

    #[test]
    fn spec_validation() {
        assert!(HypothesisSpec::new(0, 0.0, 1.0, 0.5).is_err());
        assert!(HypothesisSpec::new(2, 2.0, 1.0, 0.5).is_err());
        assert!(HypothesisSpec::new(2, 0.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn likelihood_peak_and_symmetry() {
        let s = spec(8, 0.0, 100.0, 0.5);
        let (m, v) = s.moments();
        assert!((likelihood(m, &s) - 1.0 / (2.0 * std::f64::consts::PI * v).sqrt()).abs() < 1e-15);
        for x in [0.5, 3.0, 17.0] {
            assert!((likelihood(m + x, &s) - likelihood(m - x, &s)).abs() < 1e-18);
        }
        assert_eq!(likelihood(1e9, &s), LIKELIHOOD_FLOOR);
    }

    #[test]
    fn posterior_examples() {
        let h = spec(2, 0.0, 10.0, 0.5);
        assert!((posterior_confidence(7.0, &h, &h) - 0.5).abs() < 1e-15);
        let certain = spec(2, 0.0, 0.0, 1.0);
        assert_eq!(posterior_confidence(1e4, &certain, &spec(2, 0.0, 100.0, 0.0)), 0.0);
        let h0 = spec(2, 0.0, 0.0, 0.5);
        let h1 = spec(2, 50.0, 100.0, 0.5);
        assert!(posterior_confidence(2.0, &h0, &h1) < 0.01);
        assert!(posterior_confidence(75.0, &h0, &h1) > 0.99);
        assert_eq!(posterior_confidence(f64::NAN, &spec(2, 0.0, 0.0, 0.3), &h1), 0.7);
    }

    #[test]
    fn far_tail_stays_confident() {
        let h0 = spec(2, 0.0, 100.0, 0.472);
        let h1 = spec(2, 100.0, 2000.0, 0.528);
        assert_eq!(posterior_confidence(1e7, &h0, &h1), 1.0);
    }

    #[test]
    fn schedule_fixtures() {
        let valid = vec![true; 3];
        let s = lambda_schedule(&[400.0; 3], &valid, 2, MedianOf::SquaredDistance).unwrap();
        assert_eq!(s.split_values, vec![0.0, 100.0, 200.0, 1000.0]);
        assert_eq!(s.lambda_top, 2000.0);

        let s = lambda_schedule(&[2000.0; 3], &valid, 2, MedianOf::SquaredDistance).unwrap();
        assert_eq!(s.split_values, vec![0.0, 100.0, 1000.0]);
        assert_eq!(s.lambda_top, 3500.0);

        let s = lambda_schedule(&[0.0; 3], &valid, 8, MedianOf::SquaredDistance).unwrap();
        assert_eq!(s.split_values, vec![0.0, 100.0, 1000.0]);
        assert_eq!(s.lambda_top, 2000.0);

        let s = LambdaSchedule::from_parts(&[0.0], 0.0, 8).unwrap();
        assert_eq!(s.lambda_top, 9.0);

        let s = lambda_schedule(&[400.0, 1.0, 100.0], &[true, false, true], 2, MedianOf::Distance).unwrap();
        assert_eq!(s.median, 15.0);
        assert!(s.split_values.contains(&7.5));

        assert!(matches!(
            lambda_schedule(&[1.0], &[false], 2, MedianOf::SquaredDistance),
            Err(Error::Schedule(_))
        ));
    }

    #[test]
    fn median_even_count() {
        assert_eq!(median_of_valid(&[4.0, 1.0, 3.0, 2.0], &[true; 4]), Some(2.5));
    }

    #[test]
    fn map_bounds_and_invalid_pixels() {
        let d2 = FloatMap::from_vec(3, 1, 1, vec![0.5, 5000.0, 5000.0]).unwrap();
        let valid = vec![true, true, false];
        let sched = lambda_schedule(d2.data(), &valid, 2, MedianOf::SquaredDistance).unwrap();
        let c = confidence_map(&d2, &valid, 2, 0.472, &sched).unwrap();
        let v = c.map.data();
        assert!(v[0] < 0.1 && v[1] > 0.9 && v[2] == 0.0);
        assert!(confidence_map(&d2, &valid[..2], 2, 0.5, &sched).is_err());
    }

    #[test]
    fn priors() {
        assert_eq!(operator_prior(Operator::Rg), 0.472);
        assert_eq!(operator_prior(Operator::Lbp(LbpScale { radius: 1, points: 8 })), 0.5445);
        assert_eq!(operator_prior(Operator::Lbp(LbpScale { radius: 3, points: 24 })), 0.522);
        assert_eq!(operator_prior(Operator::Lbp(LbpScale { radius: 5, points: 40 })), 0.5036);
        assert_eq!(operator_prior(Operator::Lbp(LbpScale { radius: 2, points: 16 })), 0.5);
        assert_eq!(operator_prior(Operator::Raw), 0.5);
    }
}
