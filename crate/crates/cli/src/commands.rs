use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use dhc_core::confidence::{confidence_map, lambda_schedule_with, MedianOf, SplitSpec};
use dhc_core::illumination::{correct_illumination, estimate_gray_point};
use dhc_core::lbp::{lbp_multiscale, LbpScale};
use dhc_core::nconv::{classify, train_linear, Hyper};
use dhc_core::noise::{estimate_noise_model, NoiseModel};
use dhc_core::pipeline::{
    encode_output, parse_key_values, process_image, DiagValue, Diagnostic, PipelineConfig, StreamKind,
    TrainedModel,
};
use dhc_core::raster::{encode_png, intensity, load_float_map, load_image, FloatMap, ImageRgb};
use dhc_core::rg::rg_mahalanobis;
use dhc_core::synth::{
    calibration_report, class_sample, experiment_table_tsv, limited_sample_experiment, pure_gray_fixture,
    red_circle_fixture, render_scene, scene_calibration, Arm, CalibrationReport, ExperimentConfig, Nuisance,
    SignClass, StreamCalibration,
};
use dhc_core::{Error, Result};

use crate::artifacts::Artifacts;
use crate::{Cli, Command, ConfidenceArgs, EvalCommand, PipelineArgs, TrainArgs, TransformOp};

/// Configuration file split into pipeline keys and command-specific sections.
struct Settings {
    pipeline: PipelineConfig,
    extra: BTreeMap<String, String>,
}

const SECTIONS: [&str; 2] = ["experiment.", "synth."];

fn load_settings(cli: &Cli) -> Result<Settings> {
    let mut pipeline = PipelineConfig::default();
    pipeline.encoder.seed = cli.seed;
    let mut extra = BTreeMap::new();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_key_values(&text)? {
            if SECTIONS.iter().any(|s| k.starts_with(s)) {
                extra.insert(k, v);
            } else {
                pipeline.set(&k, &v)?;
            }
        }
    }
    Ok(Settings { pipeline, extra })
}

pub fn run(cli: &Cli) -> Result<()> {
    let settings = load_settings(cli)?;
    match &cli.command {
        Command::EstimateNoise { image, output } => estimate_noise(&settings, image, output.as_deref()),
        Command::Transform { op } => transform(&settings, op),
        Command::Confidence(args) => confidence(args),
        Command::Pipeline(args) => pipeline(settings, args),
        Command::Synth { spec, output } => synth(cli, settings, spec.as_deref(), output),
        Command::Eval { what } => eval(cli, settings, what),
        Command::Train(args) => train(cli, settings, args),
        Command::Classify { model, image } => classify_image(settings, model, image),
    }
}

fn load_noise(spec: &str, img: &ImageRgb, cfg: &PipelineConfig) -> Result<NoiseModel> {
    if spec == "auto" {
        estimate_noise_model(img, &cfg.noise).map_err(|e| e.in_stage("noise"))
    } else {
        let p = Path::new(spec);
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e).in_stage("noise"))?;
        NoiseModel::parse_key_values(&text)
    }
}

fn estimate_noise(s: &Settings, image: &Path, output: Option<&Path>) -> Result<()> {
    let img = load_image(image).map_err(|e| e.in_stage("load"))?;
    let model = estimate_noise_model(&img, &s.pipeline.noise).map_err(|e| e.in_stage("noise"))?;
    match output {
        Some(p) => {
            let mut a = Artifacts::new();
            a.text(p, &model.to_key_values())?;
            a.commit();
        }
        None => print!("{}", model.to_key_values()),
    }
    Ok(())
}

fn transform(s: &Settings, op: &TransformOp) -> Result<()> {
    let mut a = Artifacts::new();
    match op {
        TransformOp::Rg {
            image,
            noise,
            output,
            d2,
            illumination,
        } => {
            let mut img = load_image(image).map_err(|e| e.in_stage("load"))?;
            let mut model = load_noise(&noise.noise, &img, &s.pipeline)?;
            if illumination.map_or(s.pipeline.illumination, |t| t.on()) {
                let gp = estimate_gray_point(&img, s.pipeline.delta).map_err(|e| e.in_stage("illumination"))?;
                let c = correct_illumination(&img, &gp, &model).map_err(|e| e.in_stage("illumination"))?;
                img = c.image;
                model = c.noise;
            }
            let out = rg_mahalanobis(&img, &model);
            a.map(output, &FloatMap::stack(&[&out.rg, &out.d2])?)?;
            if let Some(p) = d2 {
                a.map(p, &out.d2)?;
            }
        }
        TransformOp::Lbp {
            image,
            noise,
            scales,
            output,
            d2,
        } => {
            let img = load_image(image).map_err(|e| e.in_stage("load"))?;
            let model = load_noise(&noise.noise, &img, &s.pipeline)?;
            let scales = match scales {
                Some(t) => LbpScale::parse_list(t)?,
                None => s.pipeline.lbp_scales.clone(),
            };
            let out = lbp_multiscale(&intensity(&img), &scales, model.sigma_i, s.pipeline.lbp_sampling)
                .map_err(|e| e.in_stage("lbp"))?;
            a.map(output, &FloatMap::stack(&[&out.normalized_codes(), &out.d2])?)?;
            if let Some(p) = d2 {
                a.map(p, &out.d2)?;
            }
        }
    }
    a.commit();
    Ok(())
}

fn per_channel<T: Copy>(text: &str, channels: usize, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let v: Vec<T> = text.split(',').map(|s| parse(s.trim())).collect::<Result<_>>()?;
    match v.len() {
        1 => Ok(vec![v[0]; channels]),
        n if n == channels => Ok(v),
        n => Err(Error::Config(format!("{n} values for {channels} channels"))),
    }
}

fn confidence(args: &ConfidenceArgs) -> Result<()> {
    let d2 = load_float_map(&args.d2).map_err(|e| e.in_stage("load"))?;
    let c = d2.channels();
    let ks = per_channel(&args.k, c, |s| {
        s.parse::<usize>()
            .ok()
            .filter(|k| *k >= 1)
            .ok_or_else(|| Error::Config(format!("bad k {s:?}")))
    })?;
    let priors = per_channel(&args.prior, c, |s| {
        s.parse::<f64>()
            .ok()
            .filter(|p| (0.0..=1.0).contains(p))
            .ok_or_else(|| Error::Config(format!("bad prior {s:?}")))
    })?;
    let splits = match &args.splits {
        Some(t) => SplitSpec::parse_list(t)?,
        None => SplitSpec::default_list(),
    };
    let median_of: MedianOf = args.median.as_deref().unwrap_or("d2").parse()?;
    let valid_map = args.valid.as_deref().map(load_float_map).transpose()?;
    if let Some(v) = &valid_map {
        if v.width() != d2.width() || v.height() != d2.height() || (v.channels() != 1 && v.channels() != c) {
            return Err(Error::Shape("validity mask does not match the distance map".into()));
        }
    }
    let mut maps = Vec::new();
    for ch in 0..c {
        let plane = d2.extract_channel(ch);
        let valid: Vec<bool> = match &valid_map {
            Some(v) => v.channel(if v.channels() == 1 { 0 } else { ch }).iter().map(|&x| x != 0.0).collect(),
            None => vec![true; plane.plane_len()],
        };
        let sched = lambda_schedule_with(plane.data(), &valid, ks[ch], &splits, median_of)
            .map_err(|e| e.in_stage("confidence"))?;
        maps.push(confidence_map(&plane, &valid, ks[ch], priors[ch], &sched)?.map);
    }
    let refs: Vec<&FloatMap> = maps.iter().collect();
    let mut a = Artifacts::new();
    a.map(&args.output, &FloatMap::stack(&refs)?)?;
    a.commit();
    Ok(())
}

fn diag_json(d: &Diagnostic) -> Value {
    let mut m = Map::new();
    m.insert("stage".into(), json!(d.stage));
    for (k, v) in &d.fields {
        let v = match v {
            DiagValue::Int(i) => json!(i),
            DiagValue::Num(x) => json!(x),
            DiagValue::Bool(b) => json!(b),
            DiagValue::Text(t) => json!(t),
            DiagValue::Nums(v) => json!(v),
        };
        m.insert(k.clone(), v);
    }
    Value::Object(m)
}

fn diagnostics_jsonl(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("{}\n", diag_json(d))).collect()
}

fn pipeline(s: Settings, args: &PipelineArgs) -> Result<()> {
    let mut cfg = s.pipeline;
    if let Some(v) = &args.streams {
        cfg.set("streams", v)?;
    }
    if let Some(v) = &args.scales {
        cfg.set("lbp.scales", v)?;
    }
    if let Some(v) = &args.splits {
        cfg.set("schedule.splits", v)?;
    }
    if let Some(t) = args.illumination {
        cfg.illumination = t.on();
    }
    let img = load_image(&args.image).map_err(|e| e.in_stage("load"))?;
    let known = match &args.noise {
        Some(p) => Some(NoiseModel::parse_key_values(
            &fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        )?),
        None => None,
    };
    let out = process_image(&img, &cfg, known)?;
    let features = if args.features {
        Some(encode_output(&out, &cfg.build_encoder()?, cfg.confidence)?)
    } else {
        None
    };

    let mut a = Artifacts::new();
    a.dir(&args.output)?;
    let dir = &args.output;
    for st in &out.streams {
        let name = st.kind.name();
        a.map(&dir.join(format!("{name}_transform.dhcm")), &st.transform)?;
        if let Some(d2) = &st.d2 {
            a.map(&dir.join(format!("{name}_d2.dhcm")), d2)?;
        }
        a.map(&dir.join(format!("{name}_conf.dhcm")), &st.confidence)?;
    }
    let mut diags = out.diagnostics.clone();
    if let Some(f) = &features {
        let text: String = f.features.iter().map(|v| format!("{v}\n")).collect();
        a.text(&dir.join("features.txt"), &text)?;
        diags.push(Diagnostic {
            stage: "encode".into(),
            fields: vec![
                ("length".into(), DiagValue::Int(f.features.len() as i64)),
                (
                    "flagged".into(),
                    DiagValue::Text(
                        cfg.streams
                            .iter()
                            .zip(&f.flagged)
                            .filter(|(_, f)| **f)
                            .map(|(s, _)| s.name())
                            .collect::<Vec<_>>()
                            .join(","),
                    ),
                ),
            ],
        });
    }
    a.text(&dir.join("diagnostics.jsonl"), &diagnostics_jsonl(&diags))?;
    a.commit();
    Ok(())
}

fn extra_num<T: std::str::FromStr>(extra: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match extra.get(key) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        None => Ok(default),
    }
}

fn check_keys(extra: &BTreeMap<String, String>, prefix: &str, allowed: &[&str]) -> Result<()> {
    for k in extra.keys().filter(|k| k.starts_with(prefix)) {
        if !allowed.contains(&&k[prefix.len()..]) {
            return Err(Error::Config(format!("unknown configuration key {k:?}")));
        }
    }
    Ok(())
}

fn synth(cli: &Cli, mut s: Settings, spec: Option<&Path>, output: &Path) -> Result<()> {
    if let Some(p) = spec {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for (k, v) in parse_key_values(&text)? {
            let key = if k.starts_with("synth.") { k } else { format!("synth.{k}") };
            s.extra.insert(key, v);
        }
    }
    check_keys(&s.extra, "synth.", &["kind", "per_class", "canvas", "sigma", "level"])?;
    let kind = s.extra.get("synth.kind").map(String::as_str).unwrap_or("dataset");
    let sigma: f64 = extra_num(&s.extra, "synth.sigma", 0.02)?;
    let scales = s.pipeline.lbp_scales.clone();

    let scenes: Vec<(String, String, ImageRgb, dhc_core::synth::GroundTruth)> = match kind {
        "dataset" => {
            let per_class: usize = extra_num(&s.extra, "synth.per_class", 10)?;
            let nuisance = Nuisance {
                canvas: extra_num(&s.extra, "synth.canvas", 48)?,
                ..Nuisance::default()
            };
            let jobs: Vec<(SignClass, usize)> = SignClass::ALL
                .iter()
                .flat_map(|&c| (0..per_class).map(move |i| (c, i)))
                .collect();
            jobs.par_iter()
                .map(|&(c, i)| {
                    let (img, gt) = class_sample(c, &nuisance, cli.seed, i as u64)?;
                    Ok((format!("{}_{i:04}", c.name()), c.name().to_string(), img, gt))
                })
                .collect::<Result<_>>()?
        }
        "red-circle" | "gray" => {
            let spec = if kind == "gray" {
                pure_gray_fixture(extra_num(&s.extra, "synth.level", 0.5f32)?, sigma, cli.seed)
            } else {
                red_circle_fixture(sigma, cli.seed)
            };
            let (img, gt) = render_scene(&spec)?;
            vec![(kind.replace('-', "_"), kind.to_string(), img, gt)]
        }
        other => return Err(Error::Config(format!("unknown synth kind {other:?}"))),
    };

    let mut a = Artifacts::new();
    a.dir(output)?;
    let mut manifest = String::from("path\tlabel\n");
    for (name, label, img, gt) in &scenes {
        a.bytes(&output.join("images").join(format!("{name}.png")), &encode_png(img)?)?;
        a.map(&output.join("truth").join(format!("{name}_rg_h0.dhcm")), &gt.rg_mask_map())?;
        a.map(&output.join("truth").join(format!("{name}_lbp_h0.dhcm")), &gt.lbp_mask_map(&scales))?;
        manifest.push_str(&format!("images/{name}.png\t{label}\n"));
    }
    a.text(&output.join("manifest.tsv"), &manifest)?;
    a.commit();
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn report_line(stream: &str, r: &CalibrationReport) -> String {
    format!(
        "{stream}\t{}\t{}\t{}\t{}\t{}\n",
        opt(r.auc),
        opt(r.mean_conf_h0),
        opt(r.mean_conf_not_h0),
        opt(r.false_positive_rate),
        r.pixels
    )
}

fn parse_arms(text: &str) -> Result<Vec<Arm>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|part| {
            let (streams, conf) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("arm {part:?} is not streams:on|off")))?;
            let streams = streams
                .split('+')
                .map(StreamKind::parse)
                .collect::<Result<Vec<_>>>()?;
            let confidence = match conf {
                "on" => true,
                "off" => false,
                _ => return Err(Error::Config(format!("arm {part:?} is not streams:on|off"))),
            };
            Ok(Arm { streams, confidence })
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(key: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn eval(cli: &Cli, s: Settings, what: &EvalCommand) -> Result<()> {
    match what {
        EvalCommand::Calibration {
            fixture,
            sigma,
            conf,
            truth,
            include,
            output,
        } => {
            let mut table = String::from("stream\tauc\tmean_conf_h0\tmean_conf_not_h0\tfpr_at_0.5\tpixels\n");
            if let (Some(conf), Some(truth)) = (conf, truth) {
                let c = load_float_map(conf).map_err(|e| e.in_stage("load"))?;
                let t = load_float_map(truth).map_err(|e| e.in_stage("load"))?;
                if c.channels() != 1 || t.channels() != 1 || c.plane_len() != t.plane_len() {
                    return Err(Error::Shape("calibration needs single-channel maps of equal size".into()));
                }
                let inc: Vec<bool> = match include {
                    Some(p) => {
                        let m = load_float_map(p).map_err(|e| e.in_stage("load"))?;
                        if m.plane_len() != c.plane_len() {
                            return Err(Error::Shape("include mask size differs".into()));
                        }
                        m.channel(0).iter().map(|&v| v != 0.0).collect()
                    }
                    None => vec![true; c.plane_len()],
                };
                let h0: Vec<bool> = t.data().iter().map(|&v| v != 0.0).collect();
                table.push_str(&report_line("map", &calibration_report(c.data(), &h0, &inc)?));
            } else {
                let spec = match fixture.as_str() {
                    "red-circle" => red_circle_fixture(*sigma, cli.seed),
                    "gray" => pure_gray_fixture(0.5, *sigma, cli.seed),
                    other => return Err(Error::Config(format!("unknown fixture {other:?}"))),
                };
                let reports: Vec<StreamCalibration> = scene_calibration(&spec, &s.pipeline)?;
                for r in &reports {
                    table.push_str(&report_line(&r.stream, &r.report));
                }
            }
            match output {
                Some(p) => {
                    let mut a = Artifacts::new();
                    a.text(p, &table)?;
                    a.commit();
                }
                None => print!("{table}"),
            }
            Ok(())
        }
        EvalCommand::LimitedSamples { output } => {
            let e = &s.extra;
            check_keys(
                e,
                "experiment.",
                &["samples", "seeds", "test_per_class", "arms", "epochs", "lr", "l2", "batch", "canvas"],
            )?;
            let mut cfg = ExperimentConfig {
                pipeline: s.pipeline.clone(),
                encoder: s.pipeline.encoder,
                seeds: (0..5).map(|i| cli.seed + i).collect(),
                ..ExperimentConfig::default()
            };
            if let Some(v) = e.get("experiment.samples") {
                cfg.samples_per_class = parse_list("experiment.samples", v)?;
            }
            if let Some(v) = e.get("experiment.seeds") {
                cfg.seeds = parse_list("experiment.seeds", v)?;
            }
            if let Some(v) = e.get("experiment.arms") {
                cfg.arms = parse_arms(v)?;
            }
            cfg.test_per_class = extra_num(e, "experiment.test_per_class", cfg.test_per_class)?;
            cfg.hyper.epochs = extra_num(e, "experiment.epochs", cfg.hyper.epochs)?;
            cfg.hyper.lr = extra_num(e, "experiment.lr", cfg.hyper.lr)?;
            cfg.hyper.l2 = extra_num(e, "experiment.l2", cfg.hyper.l2)?;
            cfg.hyper.batch_size = extra_num(e, "experiment.batch", cfg.hyper.batch_size)?;
            cfg.nuisance.canvas = extra_num(e, "experiment.canvas", cfg.nuisance.canvas)?;
            let rows = limited_sample_experiment(&cfg)?;
            let mut a = Artifacts::new();
            a.text(output, &experiment_table_tsv(&rows))?;
            a.commit();
            Ok(())
        }
    }
}

/// `(path, label)` rows; a `path<TAB>label` header line is skipped.
fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line == "path\tlabel") {
            continue;
        }
        let (p, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected path<TAB>label", path.display(), n + 1)))?;
        rows.push((base.join(p), label.trim().to_string()));
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: empty manifest", path.display())));
    }
    Ok(rows)
}

fn train(cli: &Cli, s: Settings, args: &TrainArgs) -> Result<()> {
    let mut cfg = s.pipeline;
    if let Some(v) = &args.streams {
        cfg.set("streams", v)?;
    }
    if let Some(t) = args.conf {
        cfg.confidence = t.on();
    }
    cfg.validate()?;
    let mut rows = read_manifest(&args.manifest)?;
    if let Some(limit) = args.limit_per_class {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        rows.retain(|(_, l)| {
            let c = seen.entry(l.clone()).or_default();
            *c += 1;
            *c <= limit
        });
    }
    let class_names: Vec<String> = {
        let mut v: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let labels: Vec<usize> = rows
        .iter()
        .map(|(_, l)| class_names.binary_search(l).expect("collected"))
        .collect();
    let encoder = cfg.build_encoder()?;
    let features: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|(p, _)| {
            let img = load_image(p).map_err(|e| e.in_stage("load"))?;
            let out = process_image(&img, &cfg, None)?;
            Ok(encode_output(&out, &encoder, cfg.confidence)?.features)
        })
        .collect::<Result<_>>()?;
    let hyper = Hyper {
        lr: args.lr,
        epochs: args.epochs,
        seed: cli.seed,
        l2: args.l2,
        ..Hyper::default()
    };
    let outcome = train_linear(&features, &labels, &hyper).map_err(|e| e.in_stage("train"))?;
    let model = TrainedModel {
        streams: cfg.streams.clone(),
        lbp_scales: cfg.lbp_scales.clone(),
        confidence: cfg.confidence,
        encoder: cfg.encoder,
        class_names,
        classifier: outcome.model,
    };
    let mut a = Artifacts::new();
    a.bytes(&args.output, &model.to_bytes())?;
    a.commit();
    let _ = writeln!(std::io::stderr(), "final training loss {:.6}", outcome.final_loss);
    Ok(())
}

fn classify_image(s: Settings, model_path: &Path, image: &Path) -> Result<()> {
    let bytes = fs::read(model_path).map_err(|e| Error::io(model_path, e).in_stage("load"))?;
    let model = TrainedModel::from_bytes(&bytes).map_err(|e| e.in_stage("load"))?;
    let mut cfg = s.pipeline;
    model.apply_to(&mut cfg);
    let img = load_image(image).map_err(|e| e.in_stage("load"))?;
    let out = process_image(&img, &cfg, None)?;
    let f = encode_output(&out, &cfg.build_encoder()?, cfg.confidence)?;
    let (best, probs) = classify(&model.classifier, &f.features)?;
    let probs: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
    println!("{}\t{}", model.class_names[best], probs.join(","));
    Ok(())
}
