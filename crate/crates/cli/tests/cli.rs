use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use vimu_cli::sha256_file;
use vimu_core::data::{load_csv, save_csv, ImuSeries, CHANNELS};
use vimu_core::sim::{corrupt, NoiseParams};

fn vimu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vimu"))
        .args(args)
        .env("VIMU_LOG", "warn")
        .output()
        .expect("spawn vimu")
}

fn ok(args: &[&str]) -> Output {
    let out = vimu(args);
    assert!(
        out.status.success(),
        "vimu {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn simulate(dir: &Path, profile: &str, seed: u64) -> PathBuf {
    let prof = write(dir, "profile.json", profile);
    let out = dir.join(format!("sim{seed}"));
    ok(&[
        "simulate",
        "--profile",
        s(&prof),
        "--specs",
        "builtin",
        "--out-dir",
        s(&out),
        "--seed",
        &seed.to_string(),
    ]);
    out
}

const TRAIN_CONFIG: &str = r#"{
    "schema_version": 1, "epochs": 50, "batch_size": 32, "lr": 0.002, "steps": 20,
    "seed": 3, "window_stride": 16, "model": {"base_channels": 8, "heads": 2, "window_len": 32}
}"#;

/// One simulated figure-eight run with a trained tiny checkpoint, shared by
/// the train / generate / evaluate tests.
struct Fixture {
    _dir: tempfile::TempDir,
    sim: PathBuf,
    config: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let sim = simulate(dir.path(), r#"{"kind": "figure-eight", "duration_s": 20}"#, 4);
        let config = write(dir.path(), "train.json", TRAIN_CONFIG);
        let ckpt = dir.path().join("model.ckpt");
        train(&sim, &config, &ckpt);
        Fixture {
            _dir: dir,
            sim,
            config,
            ckpt,
        }
    })
}

fn train(sim: &Path, config: &Path, out: &Path) -> Output {
    ok(&[
        "train",
        "--lowcost",
        s(&sim.join("lowcost.csv")),
        "--reference",
        s(&sim.join("reference.csv")),
        "--noise-params",
        s(&sim.join("lowcost_noise_params.json")),
        "--config",
        s(config),
        "--out",
        s(out),
    ])
}

#[test]
fn simulate_static_writes_expected_rows_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let profile = r#"{"kind": "static", "duration_s": 60}"#;
    let a = simulate(dir.path(), profile, 9);
    for name in ["truth.csv", "reference.csv", "lowcost.csv", "truth_nav.csv"] {
        assert_eq!(rows(&a.join(name)), 12_000, "{name}");
    }
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 9);
    let listed: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["sha256"].as_str().unwrap())
        .collect();
    assert_eq!(listed[2], sha256_file(&a.join("lowcost.csv")).unwrap());

    let again = dir.path().join("again");
    let prof = dir.path().join("profile.json");
    ok(&["simulate", "--profile", s(&prof), "--out-dir", s(&again), "--seed", "9"]);
    for name in ["truth.csv", "reference.csv", "lowcost.csv", "truth_nav.csv"] {
        assert_eq!(
            sha256_file(&a.join(name)).unwrap(),
            sha256_file(&again.join(name)).unwrap(),
            "{name}"
        );
    }
    let other = simulate(dir.path(), profile, 10);
    assert_ne!(
        sha256_file(&a.join("lowcost.csv")).unwrap(),
        sha256_file(&other.join("lowcost.csv")).unwrap()
    );
}

#[test]
fn unknown_profile_kind_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let prof = write(dir.path(), "p.json", r#"{"kind": "loop-the-loop", "duration_s": 10}"#);
    let out = vimu(&["simulate", "--profile", s(&prof), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kind") && err.contains("loop-the-loop"), "{err}");
}

#[test]
fn usage_and_io_errors_have_distinct_exit_codes() {
    assert_eq!(vimu(&["simulate"]).status.code(), Some(2));
    assert_eq!(vimu(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = vimu(&["allan", "--input", s(&missing), "--out", s(&dir.path().join("a.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

fn series_file(dir: &Path, name: &str, series: &ImuSeries) -> PathBuf {
    let p = dir.join(name);
    save_csv(series, &p).unwrap();
    p
}

#[test]
fn allan_recovers_white_noise_and_writes_one_curve_row_per_tau() {
    let dir = tempfile::tempdir().unwrap();
    let density = 1e-3;
    let mut p = NoiseParams::zero(200.0);
    p.sigma_white = [density; CHANNELS];
    let zeros = ImuSeries::new(200.0, 0.0, std::array::from_fn(|_| vec![0.0; 1 << 19])).unwrap();
    let input = series_file(dir.path(), "white.csv", &corrupt(&zeros, &p, 11).unwrap());
    let (out, curve, params, svg) = (
        dir.path().join("fit.json"),
        dir.path().join("curve.csv"),
        dir.path().join("params.json"),
        dir.path().join("av.svg"),
    );
    ok(&[
        "allan",
        "--input",
        s(&input),
        "--out",
        s(&out),
        "--curve-out",
        s(&curve),
        "--params-out",
        s(&params),
        "--svg",
        s(&svg),
    ]);
    let report = read_json(&out);
    assert_eq!(report["schema_version"], 1);
    let axes = report["axes"].as_array().unwrap();
    assert_eq!(axes.len(), CHANNELS);
    for a in axes {
        let n = a["fit"]["arw"]["value"].as_f64().unwrap();
        assert!((n - density).abs() < 0.1 * density, "{}: {n}", a["axis"]);
    }
    let taus = axes[0]["curve"]["taus"].as_array().unwrap().len();
    assert_eq!(rows(&curve), taus);
    let back = NoiseParams::load_json(&params).unwrap();
    assert!((back.sigma_white[3] - density).abs() < 0.1 * density);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn allan_on_constant_input_reports_absent_terms() {
    let dir = tempfile::tempdir().unwrap();
    let series = ImuSeries::new(100.0, 0.0, std::array::from_fn(|c| vec![c as f64; 5000])).unwrap();
    let input = series_file(dir.path(), "flat.csv", &series);
    let out = dir.path().join("fit.json");
    ok(&["allan", "--input", s(&input), "--out", s(&out)]);
    let report = read_json(&out);
    for a in report["axes"].as_array().unwrap() {
        for term in ["arw", "rrw", "bias_instability", "quantization"] {
            assert_eq!(a["fit"][term]["absent"], true);
            assert_eq!(a["fit"][term]["value"], 0.0);
        }
    }
}

#[test]
fn allan_rejects_short_input_with_the_minimum_length() {
    let dir = tempfile::tempdir().unwrap();
    let series = ImuSeries::new(100.0, 0.0, std::array::from_fn(|_| vec![0.5; 150])).unwrap();
    let input = series_file(dir.path(), "short.csv", &series);
    let out = vimu(&["allan", "--input", s(&input), "--out", s(&dir.path().join("f.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 200"));
}

#[test]
fn train_writes_history_and_is_reproducible() {
    let f = fixture();
    let history = f.ckpt.with_file_name("model.loss.csv");
    // 20 s at 200 Hz, windows of 32 with stride 16 → 249 windows → 8 batches of 32
    assert_eq!(rows(&history), 50 * 8);
    assert!(f.ckpt.with_file_name("model.norm_stats.json").exists());
    let manifest = read_json(&f.ckpt.with_file_name("model.ckpt.manifest.json"));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.ckpt");
    train(&f.sim, &f.config, &again);
    assert_eq!(sha256_file(&f.ckpt).unwrap(), sha256_file(&again).unwrap());
    assert_eq!(
        sha256_file(&history).unwrap(),
        sha256_file(&dir.path().join("again.loss.csv")).unwrap()
    );
}

#[test]
fn train_rejects_unpaired_lengths() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let low = load_csv(&f.sim.join("lowcost.csv")).unwrap();
    let short = series_file(dir.path(), "short.csv", &low.slice(0, low.len() - 7).unwrap());
    let out = vimu(&[
        "train",
        "--lowcost",
        s(&short),
        "--reference",
        s(&f.sim.join("reference.csv")),
        "--noise-params",
        s(&f.sim.join("lowcost_noise_params.json")),
        "--config",
        s(&f.config),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lengths differ"));
}

#[test]
fn train_config_errors_exit_2() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.json",
        r#"{"lambda1": -1.0, "model": {"window_len": 32, "base_channels": 8, "heads": 2}}"#,
    );
    let out = vimu(&[
        "train",
        "--lowcost",
        s(&f.sim.join("lowcost.csv")),
        "--reference",
        s(&f.sim.join("reference.csv")),
        "--noise-params",
        s(&f.sim.join("lowcost_noise_params.json")),
        "--config",
        s(&bad),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda1"));
}

fn generate(input: &Path, ckpt: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "generate",
        "--lowcost",
        s(input),
        "--checkpoint",
        s(ckpt),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    vimu(&args)
}

#[test]
fn generate_keeps_rows_is_deterministic_and_records_provenance() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let low = load_csv(&f.sim.join("lowcost.csv")).unwrap();
    // a length that leaves a remainder for the passthrough path
    let input = series_file(dir.path(), "low.csv", &low.slice(0, 32 * 20 + 5).unwrap());
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert!(generate(&input, &f.ckpt, &a, &["--seed", "5"]).status.success());
    assert!(generate(&input, &f.ckpt, &b, &["--seed", "5"]).status.success());
    assert_eq!(rows(&a), 32 * 20 + 5);
    assert_eq!(sha256_file(&a).unwrap(), sha256_file(&b).unwrap());

    let prov = read_json(&dir.path().join("a.csv.provenance.json"));
    assert_eq!(prov["schema_version"], 1);
    assert_eq!(
        prov["checkpoint_sha256"].as_str().unwrap(),
        sha256_file(&f.ckpt).unwrap()
    );
    assert_eq!(prov["seed"], 5);
    assert_eq!(prov["stitch_mode"]["mode"], "non-overlapping");
    assert_eq!(prov["passthrough_samples"], 5);

    let c = dir.path().join("c.csv");
    assert!(generate(
        &input,
        &f.ckpt,
        &c,
        &["--seed", "5", "--stitch", "overlap-average", "--stride", "8"]
    )
    .status
    .success());
    assert_eq!(rows(&c), 32 * 20 + 5);
    assert_eq!(
        read_json(&dir.path().join("c.csv.provenance.json"))["stitch_mode"]["stride"],
        8
    );
}

#[test]
fn generate_rejects_input_that_does_not_fit_the_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let low = load_csv(&f.sim.join("lowcost.csv")).unwrap();
    let short = series_file(dir.path(), "short.csv", &low.slice(0, 20).unwrap());
    let out = generate(&short, &f.ckpt, &dir.path().join("o.csv"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let bad_stride = generate(
        &f.sim.join("lowcost.csv"),
        &f.ckpt,
        &dir.path().join("o.csv"),
        &["--stitch", "overlap-average", "--stride", "64"],
    );
    assert_eq!(bad_stride.status.code(), Some(2));
}

fn evaluate(f: &Fixture, candidate: &Path, out: &Path, extra: &[&str]) {
    let (low, refr, nav) = (
        f.sim.join("lowcost.csv"),
        f.sim.join("reference.csv"),
        f.sim.join("truth_nav.csv"),
    );
    let mut args = vec![
        "evaluate",
        "--candidate",
        s(candidate),
        "--baseline",
        s(&low),
        "--reference",
        s(&refr),
        "--truth-nav",
        s(&nav),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn evaluate_improvement_extremes_and_schema() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let perfect = dir.path().join("perfect.json");
    let series = dir.path().join("series");
    evaluate(
        f,
        &f.sim.join("reference.csv"),
        &perfect,
        &["--series-dir", s(&series), "--svg"],
    );
    let r = read_json(&perfect);
    assert_eq!(r["schema_version"], 1);
    for c in 0..CHANNELS {
        assert_eq!(r["rmse"]["candidate"][c], 0.0);
        assert_eq!(r["rmse"]["improvement_percent"][c], 100.0);
    }
    for who in ["candidate", "baseline"] {
        for comp in ["E", "N", "U", "yaw", "pitch", "roll"] {
            for stat in ["rms", "max", "cep95"] {
                assert!(r["navigation"][who][comp][stat].is_f64(), "{who}.{comp}.{stat}");
            }
        }
    }
    let n = load_csv(&f.sim.join("lowcost.csv")).unwrap().len();
    for name in [
        "candidate_errors.csv",
        "baseline_errors.csv",
        "candidate_track.csv",
        "truth_track.csv",
    ] {
        assert_eq!(rows(&series.join(name)), n, "{name}");
    }
    assert!(series.join("horizontal_error.svg").exists());

    let same = dir.path().join("same.json");
    evaluate(f, &f.sim.join("lowcost.csv"), &same, &[]);
    let r = read_json(&same);
    for c in 0..CHANNELS {
        assert_eq!(r["rmse"]["improvement_percent"][c], 0.0);
    }
    assert_eq!(r["navigation"]["improvement"]["horizontal_rms_percent"], 0.0);
}

#[test]
fn evaluate_rejects_misaligned_inputs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let low = load_csv(&f.sim.join("lowcost.csv")).unwrap();
    let short = series_file(dir.path(), "short.csv", &low.slice(0, 1000).unwrap());
    let out = vimu(&[
        "evaluate",
        "--candidate",
        s(&short),
        "--baseline",
        s(&f.sim.join("lowcost.csv")),
        "--reference",
        s(&f.sim.join("reference.csv")),
        "--truth-nav",
        s(&f.sim.join("truth_nav.csv")),
        "--out",
        s(&dir.path().join("e.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
