//! Normalized convolution with confidence propagation, confidence pooling, a
//! fixed two-layer encoder and a multinomial logistic-regression head.
//!
//! A layer computes, per output channel,
//!
//! ```text
//! f' = sum(w c f) / (sum(w c) + eps) + bias
//! c' = sum(w c) / sum(w)
//! ```
//!
//! over its window and all input channels. Terms with zero confidence are
//! skipped outright, so a pixel with confidence 0 cannot influence any output.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::FloatMap;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Channel-major features with an aligned confidence tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    channels: usize,
    height: usize,
    width: usize,
    features: Vec<f64>,
    confidence: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        features: Vec<f64>,
        confidence: Vec<f64>,
    ) -> Result<Self> {
        let n = channels * height * width;
        if n == 0 || features.len() != n || confidence.len() != n {
            return Err(Error::Shape(format!(
                "tensor {channels}x{height}x{width} with {} features and {} confidences",
                features.len(),
                confidence.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite feature".into()));
        }
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Value("confidence outside [0,1]".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            features,
            confidence,
        })
    }

    /// Features from a map; a single confidence channel is shared by all feature channels.
    pub fn from_maps(features: &FloatMap, confidence: Option<&FloatMap>) -> Result<Self> {
        let (c, h, w) = (features.channels(), features.height(), features.width());
        let f: Vec<f64> = features.data().iter().map(|&v| v as f64).collect();
        let conf = match confidence {
            None => vec![1.0; f.len()],
            Some(m) => {
                if m.width() != w || m.height() != h {
                    return Err(Error::Shape("confidence map size differs from features".into()));
                }
                let plane: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
                if m.channels() == c {
                    plane
                } else if m.channels() == 1 {
                    plane.repeat(c)
                } else {
                    return Err(Error::Shape(format!(
                        "{} confidence channels for {c} feature channels",
                        m.channels()
                    )));
                }
            }
        };
        Self::new(c, h, w, f, conf)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn set_feature(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.features[i] = v;
    }

    pub fn set_confidence(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.confidence[i] = v.clamp(0.0, 1.0);
    }
}

/// Odd-sized non-negative kernel bank `[c_out][c_in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormConvLayer {
    size: usize,
    c_in: usize,
    c_out: usize,
    kernel: Vec<f64>,
    bias: Vec<f64>,
    epsilon: f64,
}

impl NormConvLayer {
    pub fn new(size: usize, c_in: usize, c_out: usize, kernel: Vec<f64>, bias: Vec<f64>, epsilon: f64) -> Result<Self> {
        if size.is_multiple_of(2) || c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!("kernel {size}x{size}, {c_in}->{c_out}")));
        }
        if kernel.len() != size * size * c_in * c_out || bias.len() != c_out {
            return Err(Error::Shape("kernel or bias length does not match the layer shape".into()));
        }
        if kernel.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("kernel weights must be finite and non-negative".into()));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {epsilon}")));
        }
        let per_out = size * size * c_in;
        if kernel.chunks(per_out).any(|k| k.iter().sum::<f64>() <= 0.0) {
            return Err(Error::Config("all-zero kernel".into()));
        }
        Ok(Self {
            size,
            c_in,
            c_out,
            kernel,
            bias,
            epsilon,
        })
    }

    /// Zero bias; each `(output, input)` slice is a uniform `[0, 1)` channel gain times
    /// uniform `[0, 1)` taps, so outputs mix input channels in unequal proportions.
    pub fn random(size: usize, c_in: usize, c_out: usize, epsilon: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut kernel = Vec::with_capacity(size * size * c_in * c_out);
        for _ in 0..c_in * c_out {
            let gain = rng.random::<f64>();
            kernel.extend((0..size * size).map(|_| gain * rng.random::<f64>()));
        }
        Self::new(size, c_in, c_out, kernel, vec![0.0; c_out], epsilon)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.kernel[((o * self.c_in + i) * self.size + ky) * self.size + kx]
    }
}

/// Same-size normalized convolution; outside the image features and confidence are 0.
pub fn normalized_conv(input: &FeatureTensor, layer: &NormConvLayer) -> Result<FeatureTensor> {
    let (h, w) = (input.height, input.width);
    if input.channels != layer.c_in {
        return Err(Error::Shape(format!(
            "layer expects {} channels, input has {}",
            layer.c_in, input.channels
        )));
    }
    if h < layer.size || w < layer.size {
        return Err(Error::Shape(format!(
            "{w}x{h} input is smaller than the {0}x{0} kernel",
            layer.size
        )));
    }
    let r = (layer.size / 2) as isize;
    let plane = h * w;
    let per_out = layer.size * layer.size * layer.c_in;
    let planes: Vec<(Vec<f64>, Vec<f64>)> = (0..layer.c_out)
        .into_par_iter()
        .map(|o| {
            let wsum: f64 = layer.kernel[o * per_out..(o + 1) * per_out].iter().sum();
            let mut f_out = vec![0.0; plane];
            let mut c_out = vec![0.0; plane];
            for y in 0..h {
                for x in 0..w {
                    let (mut num, mut den) = (0.0, 0.0);
                    for i in 0..layer.c_in {
                        for ky in 0..layer.size {
                            let yy = y as isize + ky as isize - r;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..layer.size {
                                let xx = x as isize + kx as isize - r;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let idx = input.index(i, yy as usize, xx as usize);
                                let c = input.confidence[idx];
                                if c == 0.0 {
                                    continue;
                                }
                                let wc = layer.weight(o, i, ky, kx) * c;
                                num += wc * input.features[idx];
                                den += wc;
                            }
                        }
                    }
                    let j = y * w + x;
                    let denom = den + layer.epsilon;
                    f_out[j] = if denom > 0.0 { num / denom } else { 0.0 } + layer.bias[o];
                    c_out[j] = (den / wsum).clamp(0.0, 1.0);
                }
            }
            (f_out, c_out)
        })
        .collect();
    let mut features = Vec::with_capacity(plane * layer.c_out);
    let mut confidence = Vec::with_capacity(plane * layer.c_out);
    for (f, c) in planes {
        features.extend(f);
        confidence.extend(c);
    }
    FeatureTensor::new(layer.c_out, h, w, features, confidence)
}

/// Per channel and window, keep the cell of highest confidence (first in row-major order on ties).
///
/// Sizes that do not divide evenly are padded with zero-confidence cells,
/// which never win against a real cell.
pub fn confidence_pool(input: &FeatureTensor, window: usize) -> Result<FeatureTensor> {
    if window == 0 {
        return Err(Error::Config("pooling window of 0".into()));
    }
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h.div_ceil(window), w.div_ceil(window));
    let mut features = Vec::with_capacity(input.channels * oh * ow);
    let mut confidence = Vec::with_capacity(input.channels * oh * ow);
    for c in 0..input.channels {
        for by in 0..oh {
            for bx in 0..ow {
                let mut best = input.index(c, by * window, bx * window);
                for y in by * window..((by + 1) * window).min(h) {
                    for x in bx * window..((bx + 1) * window).min(w) {
                        let i = input.index(c, y, x);
                        if input.confidence[i] > input.confidence[best] {
                            best = i;
                        }
                    }
                }
                features.push(input.features[best]);
                confidence.push(input.confidence[best]);
            }
        }
    }
    FeatureTensor::new(input.channels, oh, ow, features, confidence)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kernels: usize,
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kernels: 8,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Shape of one input stream; the name keys the stream's kernels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamShape {
    pub name: String,
    pub channels: usize,
}

#[derive(Clone, Debug)]
struct StreamLayers {
    shape: StreamShape,
    first: NormConvLayer,
    second: NormConvLayer,
}

/// Per stream: 5x5 layer, pool 2, 3x3 layer, pool 2, spatial mean.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    streams: Vec<StreamLayers>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub features: Vec<f64>,
    /// Streams whose confidence was zero everywhere after the second layer.
    pub flagged: Vec<bool>,
}

fn stream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so kernels depend on the stream name and not its position
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

impl Encoder {
    pub fn new(config: EncoderConfig, shapes: &[StreamShape]) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Config("encoder needs at least one stream".into()));
        }
        if config.kernels == 0 {
            return Err(Error::Config("encoder needs at least one kernel".into()));
        }
        let streams = shapes
            .iter()
            .map(|shape| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &shape.name));
                Ok(StreamLayers {
                    first: NormConvLayer::random(5, shape.channels, config.kernels, config.epsilon, &mut rng)?,
                    second: NormConvLayer::random(3, config.kernels, config.kernels, config.epsilon, &mut rng)?,
                    shape: shape.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, streams })
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn output_len(&self) -> usize {
        self.streams.len() * self.config.kernels
    }

    /// Runs one stream through both layers and returns the pooled tensor.
    pub fn forward_stream(&self, index: usize, input: &FeatureTensor) -> Result<FeatureTensor> {
        let s = &self.streams[index];
        if input.channels != s.shape.channels {
            return Err(Error::Shape(format!(
                "stream {} expects {} channels, got {}",
                s.shape.name, s.shape.channels, input.channels
            )));
        }
        let t = confidence_pool(&normalized_conv(input, &s.first)?, 2)?;
        if t.height < 3 || t.width < 3 {
            return Err(Error::Shape(format!(
                "stream {} is too small for the encoder",
                s.shape.name
            )));
        }
        confidence_pool(&normalized_conv(&t, &s.second)?, 2)
    }

    pub fn encode(&self, inputs: &[FeatureTensor]) -> Result<Encoding> {
        if inputs.len() != self.streams.len() {
            return Err(Error::Shape(format!(
                "{} streams configured, {} given",
                self.streams.len(),
                inputs.len()
            )));
        }
        let mut features = Vec::with_capacity(self.output_len());
        let mut flagged = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            let t = self.forward_stream(i, input)?;
            let plane = t.height * t.width;
            for c in 0..t.channels {
                let sum: f64 = t.features[c * plane..(c + 1) * plane].iter().sum();
                features.push(sum / plane as f64);
            }
            flagged.push(t.confidence.iter().all(|&c| c == 0.0));
        }
        Ok(Encoding { features, flagged })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub l2: f64,
    pub batch_size: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 200,
            seed: 0,
            l2: 1e-4,
            batch_size: 16,
        }
    }
}

/// Softmax regression on standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub features: usize,
    pub classes: usize,
    /// Row-major `[feature][class]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn scores(weights: &[f64], bias: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let mut s = bias.to_vec();
    for (f, &xf) in x.iter().enumerate() {
        let row = &weights[f * classes..(f + 1) * classes];
        for (sc, w) in s.iter_mut().zip(row) {
            *sc += w * xf;
        }
    }
    s
}

/// Mean cross-entropy plus `l2/2 |W|^2`, and its gradient with respect to `W` and `b`.
pub fn loss_and_gradient(
    weights: &[f64],
    bias: &[f64],
    samples: &[&[f64]],
    labels: &[usize],
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let classes = bias.len();
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; classes];
    let mut loss = 0.0;
    let n = samples.len() as f64;
    for (x, &y) in samples.iter().zip(labels) {
        let mut p = scores(weights, bias, x, classes);
        softmax_in_place(&mut p);
        loss -= p[y].max(1e-300).ln();
        p[y] -= 1.0;
        for (f, &xf) in x.iter().enumerate() {
            for c in 0..classes {
                gw[f * classes + c] += p[c] * xf / n;
            }
        }
        for c in 0..classes {
            gb[c] += p[c] / n;
        }
    }
    loss /= n;
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in gw.iter_mut().zip(weights) {
        *g += l2 * w;
    }
    (loss, gw, gb)
}

impl LinearClassifier {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.features {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.features,
                x.len()
            )));
        }
        Ok(scores(&self.weights, &self.bias, &self.standardize(x), self.classes))
    }

    pub fn to_bytes(&self, out: &mut Vec<u8>) {
        out.extend((self.features as u32).to_le_bytes());
        out.extend((self.classes as u32).to_le_bytes());
        out.extend((self.epochs as u32).to_le_bytes());
        out.extend(self.seed.to_le_bytes());
        for v in self.weights.iter().chain(&self.bias).chain(&self.mean).chain(&self.scale) {
            out.extend(v.to_le_bytes());
        }
    }

    /// Parses what [`LinearClassifier::to_bytes`] wrote; returns the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::Format("truncated classifier parameters".into());
        let u32_at = |o: usize| -> Result<usize> {
            Ok(u32::from_le_bytes(bytes.get(o..o + 4).ok_or_else(short)?.try_into().unwrap()) as usize)
        };
        let features = u32_at(0)?;
        let classes = u32_at(4)?;
        let epochs = u32_at(8)?;
        let seed = u64::from_le_bytes(bytes.get(12..20).ok_or_else(short)?.try_into().unwrap());
        if features == 0 || classes < 2 {
            return Err(Error::Format(format!("classifier with {features} features, {classes} classes")));
        }
        let count = features
            .checked_mul(classes)
            .and_then(|n| n.checked_add(classes + 2 * features))
            .ok_or_else(short)?;
        let end = 20 + count * 8;
        let body = bytes.get(20..end).ok_or_else(short)?;
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite classifier parameter".into()));
        }
        let (weights, rest) = vals.split_at(features * classes);
        let (bias, rest) = rest.split_at(classes);
        let (mean, scale) = rest.split_at(features);
        if scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::Format("non-positive feature scale".into()));
        }
        Ok((
            Self {
                features,
                classes,
                weights: weights.to_vec(),
                bias: bias.to_vec(),
                mean: mean.to_vec(),
                scale: scale.to_vec(),
                epochs,
                seed,
            },
            end,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LinearClassifier,
    pub final_loss: f64,
}

/// Mini-batch gradient descent from zero weights; batches follow a seeded shuffle per epoch.
pub fn train_linear(samples: &[Vec<f64>], labels: &[usize], hyper: &Hyper) -> Result<TrainOutcome> {
    if samples.is_empty() || samples.len() != labels.len() {
        return Err(Error::Config("need one label per sample".into()));
    }
    if !(hyper.lr > 0.0) || hyper.batch_size == 0 || !(hyper.l2 >= 0.0) {
        return Err(Error::Config(format!("invalid hyper-parameters {hyper:?}")));
    }
    let features = samples[0].len();
    if features == 0 || samples.iter().any(|s| s.len() != features) {
        return Err(Error::Shape("samples differ in length".into()));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Value("non-finite training feature".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if classes < 2 || counts.contains(&0) {
        return Err(Error::Config(format!(
            "labels must cover at least 2 classes with no gaps, got counts {counts:?}"
        )));
    }

    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..features)
        .map(|f| samples.iter().map(|s| s[f]).sum::<f64>() / n)
        .collect();
    let scale: Vec<f64> = (0..features)
        .map(|f| {
            let v = samples.iter().map(|s| (s[f] - mean[f]).powi(2)).sum::<f64>() / n;
            if v.sqrt() > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = LinearClassifier {
        features,
        classes,
        weights: vec![0.0; features * classes],
        bias: vec![0.0; classes],
        mean,
        scale,
        epochs: hyper.epochs,
        seed: hyper.seed,
    };
    let z: Vec<Vec<f64>> = samples.iter().map(|s| model.standardize(s)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..z.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| z[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, gw, gb) = loss_and_gradient(&model.weights, &model.bias, &xs, &ys, hyper.l2);
            for (w, g) in model.weights.iter_mut().zip(gw) {
                *w -= hyper.lr * g;
            }
            for (b, g) in model.bias.iter_mut().zip(gb) {
                *b -= hyper.lr * g;
            }
        }
    }
    let xs: Vec<&[f64]> = z.iter().map(|v| v.as_slice()).collect();
    let (final_loss, _, _) = loss_and_gradient(&model.weights, &model.bias, &xs, labels, hyper.l2);
    Ok(TrainOutcome { model, final_loss })
}

/// Most probable class and the softmax probabilities.
pub fn classify(model: &LinearClassifier, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    let mut p = model.scores(x)?;
    softmax_in_place(&mut p);
    let best = p
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > p[b] { i } else { b });
    Ok((best, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(c: usize, h: usize, w: usize, seed: u64) -> FeatureTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c * h * w;
        let f = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let conf = (0..n).map(|_| rng.random::<f64>()).collect();
        FeatureTensor::new(c, h, w, f, conf).unwrap()
    }

    #[test]
    fn tensor_validation() {
        assert!(FeatureTensor::new(1, 2, 2, vec![0.0; 4], vec![1.5; 4]).is_err());
        assert!(FeatureTensor::new(1, 2, 2, vec![0.0; 3], vec![1.0; 4]).is_err());
        assert!(FeatureTensor::new(1, 2, 2, vec![f64::NAN; 4], vec![1.0; 4]).is_err());
    }

    #[test]
    fn layer_validation() {
        assert!(NormConvLayer::new(2, 1, 1, vec![1.0; 4], vec![0.0], 1e-8).is_err());
        assert!(NormConvLayer::new(3, 1, 1, vec![0.0; 9], vec![0.0], 1e-8).is_err());
        assert!(NormConvLayer::new(3, 1, 1, vec![-1.0; 9], vec![0.0], 1e-8).is_err());
        assert!(NormConvLayer::new(3, 1, 1, vec![1.0; 9], vec![0.0], 1e-8).is_ok());
    }

    #[test]
    fn constant_input_with_full_confidence() {
        let layer = NormConvLayer::new(3, 1, 1, vec![1.0; 9], vec![0.25], 0.0).unwrap();
        let t = FeatureTensor::new(1, 5, 5, vec![0.7; 25], vec![1.0; 25]).unwrap();
        let out = normalized_conv(&t, &layer).unwrap();
        for v in out.features() {
            assert!((v - 0.95).abs() < 1e-15);
        }
        // interior confidence is 1, corners see 4 of 9 taps
        assert_eq!(out.confidence()[2 * 5 + 2], 1.0);
        assert!((out.confidence()[0] - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn input_smaller_than_kernel() {
        let layer = NormConvLayer::new(5, 1, 1, vec![1.0; 25], vec![0.0], 1e-8).unwrap();
        let t = FeatureTensor::new(1, 4, 6, vec![0.0; 24], vec![1.0; 24]).unwrap();
        assert!(matches!(normalized_conv(&t, &layer), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_ties_and_padding() {
        let t = FeatureTensor::new(1, 3, 3, (0..9).map(|v| v as f64).collect(), vec![0.5; 9]).unwrap();
        let p = confidence_pool(&t, 2).unwrap();
        assert_eq!((p.height(), p.width()), (2, 2));
        assert_eq!(p.features(), &[0.0, 2.0, 6.0, 8.0]);

        let mut t = tensor(1, 4, 4, 1);
        t.set_confidence(0, 1, 0, 1.0);
        let p = confidence_pool(&t, 2).unwrap();
        assert_eq!(p.features()[0], t.features()[t.index(0, 1, 0)]);
    }

    #[test]
    fn encoder_shapes_flags_and_order() {
        let shapes = [
            StreamShape { name: "rg".into(), channels: 2 },
            StreamShape { name: "lbp".into(), channels: 3 },
        ];
        let enc = Encoder::new(EncoderConfig::default(), &shapes).unwrap();
        let a = tensor(2, 48, 48, 3);
        let b = tensor(3, 48, 48, 4);
        let e = enc.encode(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(e.features.len(), 16);
        assert_eq!(e.flagged, vec![false, false]);

        let swapped = Encoder::new(EncoderConfig::default(), &[shapes[1].clone(), shapes[0].clone()]).unwrap();
        let e2 = swapped.encode(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(&e2.features[..8], &e.features[8..]);
        assert_eq!(&e2.features[8..], &e.features[..8]);

        let dark = FeatureTensor::new(2, 48, 48, a.features().to_vec(), vec![0.0; a.features().len()]).unwrap();
        let e3 = enc.encode(&[dark, b.clone()]).unwrap();
        assert!(e3.features[..8].iter().all(|&v| v == 0.0));
        assert_eq!(e3.flagged, vec![true, false]);

        assert!(matches!(enc.encode(&[b.clone(), a.clone()]), Err(Error::Shape(_))));
    }

    #[test]
    fn separable_toy_set() {
        let xs = vec![vec![0.0, 0.0], vec![0.2, 0.1], vec![1.0, 1.0], vec![0.9, 1.2]];
        let ys = vec![0, 0, 1, 1];
        let out = train_linear(&xs, &ys, &Hyper { epochs: 200, ..Hyper::default() }).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(classify(&out.model, x).unwrap().0, *y);
        }
        assert!(out.final_loss < 0.2);
    }

    #[test]
    fn degenerate_labels() {
        let xs = vec![vec![0.0], vec![1.0]];
        assert!(train_linear(&xs, &[0, 0], &Hyper::default()).is_err());
        assert!(train_linear(&xs, &[0, 2], &Hyper::default()).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = LinearClassifier {
            features: 2,
            classes: 4,
            weights: vec![0.0; 8],
            bias: vec![0.0; 4],
            mean: vec![0.0; 2],
            scale: vec![1.0; 2],
            epochs: 0,
            seed: 0,
        };
        let (c, p) = classify(&m, &[3.0, -1.0]).unwrap();
        assert_eq!(c, 0);
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(classify(&m, &[1.0]).is_err());
    }

    #[test]
    fn classifier_bytes_round_trip() {
        let xs = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]];
        let m = train_linear(&xs, &[0, 1, 2], &Hyper::default()).unwrap().model;
        let mut bytes = Vec::new();
        m.to_bytes(&mut bytes);
        let (back, used) = LinearClassifier::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(used, bytes.len());
        assert!(LinearClassifier::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
