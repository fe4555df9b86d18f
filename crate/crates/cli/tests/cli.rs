use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dhc_core::raster::{load_float_map, save_image};
use dhc_core::synth::{red_circle_fixture, render_scene};
use dhc_core::ImageRgb;

fn dhc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhc")).args(args).output().unwrap()
}

fn fixture(dir: &Path) -> PathBuf {
    let (img, _) = render_scene(&red_circle_fixture(0.02, 0)).unwrap();
    let p = dir.join("fixture.png");
    save_image(&img, &p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn default_pipeline_writes_two_streams_of_three_maps() {
    let t = tempfile::tempdir().unwrap();
    let img = fixture(t.path());
    let out = t.path().join("out");
    let r = dhc(&["pipeline", s(&img), "-o", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        listing(&out),
        [
            "diagnostics.jsonl",
            "lbp_conf.dhcm",
            "lbp_d2.dhcm",
            "lbp_transform.dhcm",
            "rg_conf.dhcm",
            "rg_d2.dhcm",
            "rg_transform.dhcm"
        ]
    );
    let diag = fs::read_to_string(out.join("diagnostics.jsonl")).unwrap();
    let stages: Vec<String> = diag
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(stages[0], "noise");
    assert!(stages.contains(&"illumination".to_string()));
    assert!(stages.contains(&"rg".to_string()));
    assert!(stages.iter().any(|s| s.starts_with("lbp.")));
    let lbp = load_float_map(&out.join("lbp_transform.dhcm")).unwrap();
    assert_eq!((lbp.channels(), lbp.width(), lbp.height()), (3, 64, 64));
    let conf = load_float_map(&out.join("rg_conf.dhcm")).unwrap();
    assert!(conf.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn stream_subset_and_config_override() {
    let t = tempfile::tempdir().unwrap();
    let img = fixture(t.path());
    let cfg = t.path().join("p.cfg");
    fs::write(&cfg, "# only texture\nstreams = lbp\nlbp.scales = 1:8\n").unwrap();
    let out = t.path().join("a");
    assert!(dhc(&["--config", s(&cfg), "pipeline", s(&img), "-o", s(&out)]).status.success());
    assert_eq!(listing(&out), ["diagnostics.jsonl", "lbp_conf.dhcm", "lbp_d2.dhcm", "lbp_transform.dhcm"]);
    let out = t.path().join("b");
    assert!(dhc(&["--config", s(&cfg), "pipeline", s(&img), "--streams", "rg", "-o", s(&out)]).status.success());
    assert_eq!(listing(&out), ["diagnostics.jsonl", "rg_conf.dhcm", "rg_d2.dhcm", "rg_transform.dhcm"]);
}

#[test]
fn missing_input_fails_without_artifacts() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("never");
    let r = dhc(&["pipeline", s(&t.path().join("absent.png")), "-o", s(&out)]);
    assert!(!r.status.success());
    assert!(!out.exists());
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error: load:"));
}

#[test]
fn stage_errors_name_the_stage_and_clean_up() {
    let t = tempfile::tempdir().unwrap();
    let img = t.path().join("tiny.png");
    save_image(&ImageRgb::filled(4, 4, [0.5; 3]).unwrap(), &img).unwrap();
    let out = t.path().join("o");
    let r = dhc(&["pipeline", s(&img), "-o", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("noise:"));
    assert!(!out.exists());
}

#[test]
fn transform_then_confidence() {
    let t = tempfile::tempdir().unwrap();
    let img = fixture(t.path());
    let noise = t.path().join("noise.txt");
    assert!(dhc(&["estimate-noise", s(&img), "-o", s(&noise)]).status.success());
    assert!(fs::read_to_string(&noise).unwrap().contains("sigma_i="));

    let (rg, d2) = (t.path().join("rg.dhcm"), t.path().join("d2.dhcm"));
    let r = dhc(&["transform", "rg", s(&img), "--noise", s(&noise), "-o", s(&rg), "--d2", s(&d2)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rg_map = load_float_map(&rg).unwrap();
    assert_eq!(rg_map.channels(), 3);
    assert_eq!(rg_map.channel(2), load_float_map(&d2).unwrap().data());

    let conf = t.path().join("conf.dhcm");
    let r = dhc(&["confidence", s(&d2), "--k", "2", "--prior", "0.472", "--splits", "0,100,1000,auto", "-o", s(&conf)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let c = load_float_map(&conf).unwrap();
    // circle centre is coloured, corner is gray
    assert!(c.get(0, 32, 32) > 0.5);
    assert!(c.get(0, 2, 2) < 0.1);

    let lbp = t.path().join("lbp.dhcm");
    assert!(dhc(&["transform", "lbp", s(&img), "--scales", "1:8,2:16", "-o", s(&lbp)]).status.success());
    assert_eq!(load_float_map(&lbp).unwrap().channels(), 4);

    let bad = t.path().join("bad.dhcm");
    assert!(!dhc(&["confidence", s(&d2), "--k", "2,2", "--prior", "0.5", "-o", s(&bad)]).status.success());
    assert!(!bad.exists());
}

#[test]
fn synth_train_classify() {
    let t = tempfile::tempdir().unwrap();
    let spec = t.path().join("spec.cfg");
    fs::write(&spec, "kind = dataset\nper_class = 4\n").unwrap();
    let data = t.path().join("data");
    let r = dhc(&["--seed", "3", "synth", "--spec", s(&spec), "-o", s(&data)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let manifest = fs::read_to_string(data.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 7 * 4);
    assert_eq!(fs::read_dir(data.join("truth")).unwrap().count(), 2 * 7 * 4);

    let model = t.path().join("model.bin");
    let r = dhc(&[
        "train",
        "--manifest",
        s(&data.join("manifest.tsv")),
        "--streams",
        "rg,lbp",
        "--conf",
        "on",
        "--limit-per-class",
        "3",
        "--epochs",
        "50",
        "-o",
        s(&model),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(fs::read(&model).unwrap().starts_with(b"DHNM"));

    let first = manifest.lines().nth(1).unwrap().split('\t').next().unwrap();
    let r = dhc(&["classify", "--model", s(&model), s(&data.join(first))]);
    assert!(r.status.success());
    let line = String::from_utf8(r.stdout).unwrap();
    let (class, probs) = line.trim().split_once('\t').unwrap();
    assert!(manifest.contains(class));
    let total: f64 = probs.split(',').map(|p| p.parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-5);
}

#[test]
fn calibration_from_maps() {
    let t = tempfile::tempdir().unwrap();
    let img = fixture(t.path());
    let spec = t.path().join("spec.cfg");
    fs::write(&spec, "kind = red-circle\n").unwrap();
    let data = t.path().join("data");
    assert!(dhc(&["synth", "--spec", s(&spec), "-o", s(&data)]).status.success());
    let out = t.path().join("p");
    assert!(dhc(&["pipeline", s(&img), "--streams", "rg", "-o", s(&out)]).status.success());
    let table = t.path().join("cal.tsv");
    let r = dhc(&[
        "eval",
        "calibration",
        "--conf",
        s(&out.join("rg_conf.dhcm")),
        "--truth",
        s(&data.join("truth/red_circle_rg_h0.dhcm")),
        "-o",
        s(&table),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&table).unwrap();
    let auc: f64 = text.lines().nth(1).unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!(auc > 0.9, "{text}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.cfg");
    fs::write(&cfg, "streams = rg\nnot.a.key = 1\n").unwrap();
    let img = fixture(t.path());
    assert!(!dhc(&["--config", s(&cfg), "estimate-noise", s(&img)]).status.success());
}
