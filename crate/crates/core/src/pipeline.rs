//! The stages chained for one image: noise estimation, gray-point correction,
//! operators, schedules and confidence, plus encoding for the classifier.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::confidence::{
    confidence_map, lambda_schedule_with, operator_prior, LambdaSchedule, MedianOf, Operator, SplitSpec,
};
use crate::error::{Error, Result};
use crate::illumination::{correct_illumination, estimate_gray_point, DEFAULT_DELTA};
use crate::lbp::{default_scales, lbp_multiscale, LbpScale, NeighborSampling};
use crate::nconv::{Encoder, EncoderConfig, Encoding, FeatureTensor, StreamShape};
use crate::noise::{estimate_noise_model_with_mask, NoiseEstimationParams, NoiseModel};
use crate::raster::{intensity, FloatMap, ImageRgb};
use crate::rg::{rg_mahalanobis, RG_DOF};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamKind {
    Rg,
    Lbp,
    Raw,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rg => "rg",
            Self::Lbp => "lbp",
            Self::Raw => "raw",
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Self::Rg => 1,
            Self::Lbp => 2,
            Self::Raw => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "rg" => Ok(Self::Rg),
            "lbp" => Ok(Self::Lbp),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!("unknown stream {other:?}"))),
        }
    }

    /// Comma-separated, order kept, duplicates rejected.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for part in text.split(',').filter(|s| !s.trim().is_empty()) {
            let k = Self::parse(part)?;
            if out.contains(&k) {
                return Err(Error::Config(format!("stream {} listed twice", k.name())));
            }
            out.push(k);
        }
        if out.is_empty() {
            return Err(Error::Config("no streams selected".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub streams: Vec<StreamKind>,
    pub lbp_scales: Vec<LbpScale>,
    pub lbp_sampling: NeighborSampling,
    pub noise: NoiseEstimationParams,
    pub illumination: bool,
    pub delta: f64,
    /// Overrides keyed `rg`, `raw` or `lbp.r:p`.
    pub priors: BTreeMap<String, f64>,
    pub splits: Vec<SplitSpec>,
    pub median_of: MedianOf,
    pub encoder: EncoderConfig,
    /// Use the confidence maps when encoding; otherwise all ones.
    pub confidence: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            streams: vec![StreamKind::Rg, StreamKind::Lbp],
            lbp_scales: default_scales(),
            lbp_sampling: NeighborSampling::Nearest,
            noise: NoiseEstimationParams::default(),
            illumination: true,
            delta: DEFAULT_DELTA,
            priors: BTreeMap::new(),
            splits: SplitSpec::default_list(),
            median_of: MedianOf::SquaredDistance,
            encoder: EncoderConfig::default(),
            confidence: true,
        }
    }
}

fn parse_on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} expects on or off, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "streams" => self.streams = StreamKind::parse_list(v)?,
            "lbp.scales" => self.lbp_scales = LbpScale::parse_list(v)?,
            "lbp.sampling" => self.lbp_sampling = v.parse()?,
            "noise.structure_fraction" => self.noise.structure_fraction = parse_num(key, v)?,
            "noise.extreme_discard" => self.noise.extreme_discard = parse_num(key, v)?,
            "noise.canny_low" => self.noise.canny_low = parse_num(key, v)?,
            "noise.canny_high" => self.noise.canny_high = parse_num(key, v)?,
            "noise.edge_exclusion_radius" => self.noise.edge_exclusion_radius = parse_num(key, v)?,
            "illumination" => self.illumination = parse_on_off(key, v)?,
            "illumination.delta" => self.delta = parse_num(key, v)?,
            "schedule.splits" => self.splits = SplitSpec::parse_list(v)?,
            "schedule.median" => self.median_of = v.parse()?,
            "encoder.kernels" => self.encoder.kernels = parse_num(key, v)?,
            "encoder.seed" => self.encoder.seed = parse_num(key, v)?,
            "encoder.epsilon" => self.encoder.epsilon = parse_num(key, v)?,
            "confidence" => self.confidence = parse_on_off(key, v)?,
            _ => {
                if let Some(op) = key.strip_prefix("prior.") {
                    let p: f64 = parse_num(key, v)?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::Config(format!("{key}={p} is outside [0,1]")));
                    }
                    let op = match op {
                        "rg" | "raw" => op.to_string(),
                        _ => {
                            let scale = op
                                .strip_prefix("lbp.")
                                .ok_or_else(|| Error::Config(format!("unknown prior key {key:?}")))?;
                            let s = LbpScale::parse(scale)?;
                            format!("lbp.{}:{}", s.radius, s.points)
                        }
                    };
                    self.priors.insert(op, p);
                } else {
                    return Err(Error::Config(format!("unknown configuration key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams.is_empty() {
            return Err(Error::Config("no streams selected".into()));
        }
        for s in &self.lbp_scales {
            s.validate()?;
        }
        self.noise.validate()?;
        if !(self.delta > 0.0 && self.delta < 1.0 / 3.0) {
            return Err(Error::Config(format!("illumination.delta {} outside (0, 1/3)", self.delta)));
        }
        if self.splits.is_empty() {
            return Err(Error::Config("empty split list".into()));
        }
        if self.encoder.kernels == 0 || !(self.encoder.epsilon >= 0.0) {
            return Err(Error::Config("encoder needs kernels >= 1 and epsilon >= 0".into()));
        }
        Ok(())
    }

    pub fn prior(&self, op: Operator) -> f64 {
        let key = match op {
            Operator::Rg => "rg".to_string(),
            Operator::Raw => "raw".to_string(),
            Operator::Lbp(s) => format!("lbp.{}:{}", s.radius, s.points),
        };
        self.priors.get(&key).copied().unwrap_or_else(|| operator_prior(op))
    }

    pub fn stream_shapes(&self) -> Vec<StreamShape> {
        self.streams
            .iter()
            .map(|&k| StreamShape {
                name: k.name().to_string(),
                channels: match k {
                    StreamKind::Rg => 2,
                    StreamKind::Lbp => self.lbp_scales.len(),
                    StreamKind::Raw => 3,
                },
            })
            .collect()
    }

    pub fn build_encoder(&self) -> Result<Encoder> {
        Encoder::new(self.encoder, &self.stream_shapes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DiagValue {
    Int(i64),
    Num(f64),
    Bool(bool),
    Text(String),
    Nums(Vec<f64>),
}

/// One structured record per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub stage: String,
    pub fields: Vec<(String, DiagValue)>,
}

impl Diagnostic {
    fn new(stage: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            fields: Vec::new(),
        }
    }

    fn with(mut self, key: &str, v: DiagValue) -> Self {
        self.fields.push((key.to_string(), v));
        self
    }

    fn num(self, key: &str, v: f64) -> Self {
        self.with(key, DiagValue::Num(v))
    }

    fn int(self, key: &str, v: usize) -> Self {
        self.with(key, DiagValue::Int(v as i64))
    }
}

fn schedule_diag(d: Diagnostic, s: &LambdaSchedule, prior: f64) -> Diagnostic {
    d.num("median", s.median)
        .with("splits", DiagValue::Nums(s.split_values.clone()))
        .num("lambda_top", s.lambda_top)
        .num("prior", prior)
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub kind: StreamKind,
    /// rg: 2 channels; lbp: normalized codes per scale; raw: RGB.
    pub transform: FloatMap,
    /// One channel per scale (one for rg); absent for raw.
    pub d2: Option<FloatMap>,
    /// One channel per scale (one for rg and raw).
    pub confidence: FloatMap,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub noise: NoiseModel,
    pub streams: Vec<StreamOutput>,
    pub diagnostics: Vec<Diagnostic>,
}

impl PipelineOutput {
    pub fn stream(&self, kind: StreamKind) -> Option<&StreamOutput> {
        self.streams.iter().find(|s| s.kind == kind)
    }
}

/// Noise model from the image, or the given one.
pub fn noise_stage(img: &ImageRgb, cfg: &PipelineConfig, known: Option<NoiseModel>) -> Result<(NoiseModel, Diagnostic)> {
    let d = Diagnostic::new("noise");
    let (model, d) = match known {
        Some(m) => (m, d.with("source", DiagValue::Text("given".into()))),
        None => {
            let (m, mask) = estimate_noise_model_with_mask(img, &cfg.noise).map_err(|e| e.in_stage("noise"))?;
            (
                m,
                d.with("source", DiagValue::Text("estimated".into()))
                    .int("selected", mask.count()),
            )
        }
    };
    let d = d
        .num("sigma_r", model.sigma_r)
        .num("sigma_g", model.sigma_g)
        .num("sigma_b", model.sigma_b)
        .num("sigma_i", model.sigma_i);
    Ok((model, d))
}

fn rg_stream(img: &ImageRgb, noise: &NoiseModel, cfg: &PipelineConfig) -> Result<(StreamOutput, Vec<Diagnostic>)> {
    let mut diags = Vec::new();
    let mut img = img.clone();
    let mut noise = *noise;
    let mut d = Diagnostic::new("illumination").with("enabled", DiagValue::Bool(cfg.illumination));
    if cfg.illumination {
        match estimate_gray_point(&img, cfg.delta).and_then(|gp| correct_illumination(&img, &gp, &noise).map(|c| (gp, c))) {
            Ok((gp, c)) => {
                d = d
                    .with("applied", DiagValue::Bool(true))
                    .num("r_bar", gp.r_bar)
                    .num("g_bar", gp.g_bar)
                    .int("support", gp.support_count)
                    .with("gains", DiagValue::Nums(c.gains.to_vec()))
                    .int("clipped", c.clipped);
                img = c.image;
                noise = c.noise;
            }
            Err(e @ (Error::GrayPoint(_) | Error::DegenerateIlluminant(_))) => {
                d = d
                    .with("applied", DiagValue::Bool(false))
                    .with("reason", DiagValue::Text(e.to_string()));
            }
            Err(e) => return Err(e.in_stage("illumination")),
        }
    }
    diags.push(d);

    let out = rg_mahalanobis(&img, &noise);
    let prior = cfg.prior(Operator::Rg);
    let schedule = lambda_schedule_with(out.d2.data(), &out.valid, RG_DOF, &cfg.splits, cfg.median_of)
        .map_err(|e| e.in_stage("rg"))?;
    let conf = confidence_map(&out.d2, &out.valid, RG_DOF, prior, &schedule).map_err(|e| e.in_stage("rg"))?;
    diags.push(schedule_diag(
        Diagnostic::new("rg").int("invalid", out.invalid_count()),
        &schedule,
        prior,
    ));
    Ok((
        StreamOutput {
            kind: StreamKind::Rg,
            transform: out.rg,
            d2: Some(out.d2),
            confidence: conf.map,
        },
        diags,
    ))
}

fn lbp_stream(img: &ImageRgb, noise: &NoiseModel, cfg: &PipelineConfig) -> Result<(StreamOutput, Vec<Diagnostic>)> {
    let out = lbp_multiscale(&intensity(img), &cfg.lbp_scales, noise.sigma_i, cfg.lbp_sampling)
        .map_err(|e| e.in_stage("lbp"))?;
    let mut diags = Vec::new();
    let mut confs = Vec::new();
    for (i, &scale) in out.scales.iter().enumerate() {
        let d2 = out.d2.extract_channel(i);
        let prior = cfg.prior(Operator::Lbp(scale));
        let schedule = lambda_schedule_with(d2.data(), &out.valid[i], scale.points, &cfg.splits, cfg.median_of)
            .map_err(|e| e.in_stage("lbp"))?;
        confs.push(
            confidence_map(&d2, &out.valid[i], scale.points, prior, &schedule)
                .map_err(|e| e.in_stage("lbp"))?
                .map,
        );
        diags.push(schedule_diag(
            Diagnostic::new(format!("lbp.{}:{}", scale.radius, scale.points))
                .with("sigma_floored", DiagValue::Bool(out.sigma_floored)),
            &schedule,
            prior,
        ));
    }
    let refs: Vec<&FloatMap> = confs.iter().collect();
    Ok((
        StreamOutput {
            kind: StreamKind::Lbp,
            transform: out.normalized_codes(),
            confidence: FloatMap::stack(&refs)?,
            d2: Some(out.d2),
        },
        diags,
    ))
}

fn raw_stream(img: &ImageRgb) -> Result<StreamOutput> {
    let chans: Vec<FloatMap> = (0..3).map(|c| img.channel(c)).collect();
    let refs: Vec<&FloatMap> = chans.iter().collect();
    Ok(StreamOutput {
        kind: StreamKind::Raw,
        transform: FloatMap::stack(&refs)?,
        d2: None,
        confidence: FloatMap::from_vec(img.width(), img.height(), 1, vec![1.0; img.len()])?,
    })
}

/// Runs every configured stream; the noise model is estimated unless given.
pub fn process_image(img: &ImageRgb, cfg: &PipelineConfig, known_noise: Option<NoiseModel>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let (noise, noise_diag) = if cfg.streams.iter().any(|s| *s != StreamKind::Raw) {
        noise_stage(img, cfg, known_noise)?
    } else {
        (known_noise.unwrap_or_else(NoiseModel::zero), Diagnostic::new("noise").with("source", DiagValue::Text("unused".into())))
    };
    let results: Vec<Result<(StreamOutput, Vec<Diagnostic>)>> = cfg
        .streams
        .par_iter()
        .map(|&k| match k {
            StreamKind::Rg => rg_stream(img, &noise, cfg),
            StreamKind::Lbp => lbp_stream(img, &noise, cfg),
            StreamKind::Raw => raw_stream(img).map(|s| (s, Vec::new())),
        })
        .collect();
    let mut streams = Vec::new();
    let mut diagnostics = vec![noise_diag];
    for r in results {
        let (s, d) = r?;
        streams.push(s);
        diagnostics.extend(d);
    }
    Ok(PipelineOutput {
        noise,
        streams,
        diagnostics,
    })
}

/// Encoder input for one stream; `use_confidence = false` gives all-ones confidence.
pub fn stream_tensor(s: &StreamOutput, use_confidence: bool) -> Result<FeatureTensor> {
    FeatureTensor::from_maps(&s.transform, use_confidence.then_some(&s.confidence))
}

pub fn encode_output(out: &PipelineOutput, encoder: &Encoder, use_confidence: bool) -> Result<Encoding> {
    let tensors = out
        .streams
        .iter()
        .map(|s| stream_tensor(s, use_confidence))
        .collect::<Result<Vec<_>>>()?;
    encoder.encode(&tensors).map_err(|e| e.in_stage("encode"))
}

/// Image to feature vector with the configured streams and confidence setting.
pub fn image_features(img: &ImageRgb, cfg: &PipelineConfig, encoder: &Encoder) -> Result<Encoding> {
    let out = process_image(img, cfg, None)?;
    encode_output(&out, encoder, cfg.confidence)
}

pub const MODEL_MAGIC: &[u8; 4] = b"DHNM";
pub const MODEL_VERSION: u16 = 1;

/// Classifier plus everything needed to rebuild its feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub streams: Vec<StreamKind>,
    pub lbp_scales: Vec<LbpScale>,
    pub confidence: bool,
    pub encoder: EncoderConfig,
    pub class_names: Vec<String>,
    pub classifier: crate::nconv::LinearClassifier,
}

impl TrainedModel {
    /// Pipeline configuration matching the model's feature extractor.
    pub fn apply_to(&self, cfg: &mut PipelineConfig) {
        cfg.streams = self.streams.clone();
        cfg.lbp_scales = self.lbp_scales.clone();
        cfg.confidence = self.confidence;
        cfg.encoder = self.encoder;
    }

    /// Little-endian: magic, version, streams, confidence flag, encoder, scales, names, parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MODEL_MAGIC);
        out.extend(MODEL_VERSION.to_le_bytes());
        out.push(self.streams.len() as u8);
        out.extend(self.streams.iter().map(|s| s.bit()));
        out.push(self.confidence as u8);
        out.extend((self.encoder.kernels as u32).to_le_bytes());
        out.extend(self.encoder.seed.to_le_bytes());
        out.extend(self.encoder.epsilon.to_le_bytes());
        out.push(self.lbp_scales.len() as u8);
        for s in &self.lbp_scales {
            out.extend((s.radius as u16).to_le_bytes());
            out.extend((s.points as u16).to_le_bytes());
        }
        out.extend((self.class_names.len() as u16).to_le_bytes());
        for n in &self.class_names {
            out.extend((n.len() as u16).to_le_bytes());
            out.extend(n.as_bytes());
        }
        self.classifier.to_bytes(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let n = r.u8()? as usize;
        let streams = (0..n)
            .map(|_| match r.u8()? {
                1 => Ok(StreamKind::Rg),
                2 => Ok(StreamKind::Lbp),
                4 => Ok(StreamKind::Raw),
                b => Err(Error::Format(format!("unknown stream tag {b}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let confidence = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad confidence flag {b}"))),
        };
        let kernels = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let epsilon = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let ns = r.u8()? as usize;
        let lbp_scales = (0..ns)
            .map(|_| LbpScale::new(r.u16()? as usize, r.u16()? as usize))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        let nc = r.u16()? as usize;
        let class_names = (0..nc)
            .map(|_| {
                let len = r.u16()? as usize;
                String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("class name is not UTF-8".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let (classifier, used) = crate::nconv::LinearClassifier::from_bytes(&bytes[r.pos..])?;
        if r.pos + used != bytes.len() {
            return Err(Error::Format("trailing bytes after model parameters".into()));
        }
        let model = Self {
            streams,
            lbp_scales,
            confidence,
            encoder: EncoderConfig { kernels, seed, epsilon },
            class_names,
            classifier,
        };
        let mut cfg = PipelineConfig::default();
        model.apply_to(&mut cfg);
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        if model.class_names.len() != model.classifier.classes
            || cfg.build_encoder().map_err(|e| Error::Format(e.to_string()))?.output_len() != model.classifier.features
        {
            return Err(Error::Format("model header does not match its parameters".into()));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated model file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_keys() {
        let mut c = PipelineConfig::default();
        c.apply_text(
            "# comment\nstreams = rg\nlbp.scales=1:8,5:40\nprior.rg=0.3\nprior.lbp.1:8 = 0.6\n\
             schedule.splits=0,auto\nschedule.median=d\nillumination=off\nencoder.kernels=4\n",
        )
        .unwrap();
        assert_eq!(c.streams, vec![StreamKind::Rg]);
        assert_eq!(c.prior(Operator::Rg), 0.3);
        assert_eq!(c.prior(Operator::Lbp(LbpScale { radius: 1, points: 8 })), 0.6);
        assert_eq!(c.prior(Operator::Lbp(LbpScale { radius: 5, points: 40 })), 0.5036);
        assert_eq!(c.splits, vec![SplitSpec::Fixed(0.0), SplitSpec::Auto]);
        assert_eq!(c.median_of, MedianOf::Distance);
        assert!(!c.illumination);
        assert_eq!(c.encoder.kernels, 4);
        c.validate().unwrap();

        assert!(c.set("nope", "1").is_err());
        assert!(c.set("prior.rg", "1.5").is_err());
        assert!(c.set("streams", "rg,rg").is_err());
        assert!(c.apply_text("streams").is_err());
    }

    #[test]
    fn stream_shapes_follow_declaration() {
        let mut c = PipelineConfig::default();
        c.set("streams", "lbp,raw,rg").unwrap();
        let s: Vec<(String, usize)> = c.stream_shapes().into_iter().map(|s| (s.name, s.channels)).collect();
        assert_eq!(s, vec![("lbp".into(), 3), ("raw".into(), 3), ("rg".into(), 2)]);
    }

    #[test]
    fn model_round_trip() {
        let xs = vec![vec![0.0; 16], vec![1.0; 16]];
        let classifier = crate::nconv::train_linear(&xs, &[0, 1], &crate::nconv::Hyper::default())
            .unwrap()
            .model;
        let m = TrainedModel {
            streams: vec![StreamKind::Rg, StreamKind::Lbp],
            lbp_scales: default_scales(),
            confidence: true,
            encoder: EncoderConfig::default(),
            class_names: vec!["a".into(), "b".into()],
            classifier,
        };
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"DHNM");
        assert_eq!(TrainedModel::from_bytes(&bytes).unwrap(), m);
        assert!(TrainedModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TrainedModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let img = ImageRgb::filled(4, 4, [0.5; 3]).unwrap();
        let err = process_image(&img, &PipelineConfig::default(), None).unwrap_err();
        assert!(err.to_string().starts_with("noise:"), "{err}");
    }
}
