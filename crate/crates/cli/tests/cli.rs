use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use varflow::imaging::load_image;
use varflow::metrics::{read_flo, save_gray, write_flo, GroundTruth};
use varflow::synthetic::{shifted_texture, translating_square, SyntheticPair};

fn varflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varflow")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write_gray(path: &Path, img: &varflow::imaging::Image) {
    let bytes: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    save_gray(path, img.width(), img.height(), &bytes).unwrap();
}

/// Writes the pair as 8-bit PNGs and its truth as `.flo`.
fn write_pair(dir: &Path, pair: &SyntheticPair) -> (PathBuf, PathBuf, PathBuf) {
    let (a, b, t) = (dir.join("f0.png"), dir.join("f1.png"), dir.join("truth.flo"));
    write_gray(&a, &pair.frame0);
    write_gray(&b, &pair.frame1);
    let (w, h) = (pair.frame0.width(), pair.frame0.height());
    write_flo(&t, &GroundTruth::from_f64(w, h, &pair.truth).unwrap()).unwrap();
    (a, b, t)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout {}\nstderr {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const FAST: &[&str] = &["--parts", "2", "--overlap", "3", "--schwarz-iters", "4", "--workers", "2"];

#[test]
fn identical_frames_yield_zero_flow() {
    let dir = tempfile::tempdir().unwrap();
    let pair = shifted_texture(20, 16, 0.0, 0.0).unwrap();
    let (a, _, _) = write_pair(dir.path(), &pair);
    let mut args = vec!["--frame0", s(&a), "--frame1", s(&a), "--illumination", "off"];
    args.extend_from_slice(FAST);
    ok(&varflow(dir.path(), &args));
    let flo = read_flo(dir.path().join("flow.flo")).unwrap();
    assert_eq!((flo.width, flo.height), (20, 16));
    assert!(flo.flow.iter().all(|v| v[0].abs() <= 1e-8 && v[1].abs() <= 1e-8));
    let png = load_image(dir.path().join("flow.png")).unwrap();
    assert_eq!((png.width(), png.height()), (20, 16));
    let csv = std::fs::read_to_string(dir.path().join("increments.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,increment,seconds"));
}

#[test]
fn missing_frame_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = varflow(dir.path(), &["--frame0", "missing0.png", "--frame1", "missing1.png"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("imaging.load_image"), "{err}");
}

#[test]
fn bad_flag_value_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = varflow(dir.path(), &["--frame0", "a.png", "--frame1", "b.png", "--alpha", "lots"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cli.config"));
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let pair = translating_square(24, 24, 8, 1.0, 0.5).unwrap();
    let (a, b, _) = write_pair(dir.path(), &pair);
    let mut bytes = Vec::new();
    for (name, workers) in [("r1.flo", "1"), ("r2.flo", "1"), ("r3.flo", "2")] {
        let mut args = vec!["--frame0", s(&a), "--frame1", s(&b), "--out-flo", name];
        args.extend_from_slice(FAST);
        args.extend_from_slice(&["--workers", workers]);
        ok(&varflow(dir.path(), &args));
        bytes.push(std::fs::read(dir.path().join(name)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(bytes[0], bytes[2]);
}

#[test]
fn stiff_illumination_matches_classical_model() {
    let dir = tempfile::tempdir().unwrap();
    let pair = shifted_texture(24, 24, 0.4, 0.2).unwrap();
    let (a, b, _) = write_pair(dir.path(), &pair);
    let common = ["--frame0", s(&a), "--frame1", s(&b), "--alpha", "0.01", "--adapt", "off"];
    let mut off = common.to_vec();
    off.extend_from_slice(&["--illumination", "off", "--out-flo", "off.flo"]);
    off.extend_from_slice(FAST);
    let mut on = common.to_vec();
    on.extend_from_slice(&["--illumination", "on", "--lambda", "1e12", "--out-flo", "on.flo"]);
    on.extend_from_slice(FAST);
    ok(&varflow(dir.path(), &off));
    ok(&varflow(dir.path(), &on));
    let f_off = read_flo(dir.path().join("off.flo")).unwrap();
    let f_on = read_flo(dir.path().join("on.flo")).unwrap();
    let ee = varflow::metrics::ee(&f_on.as_f64(), &f_off).unwrap();
    assert!(ee <= 1e-3, "EE {ee}");
    assert!(f_off.flow.iter().any(|v| v[0].abs() > 0.05), "flow is not trivially zero");
}

#[test]
fn metrics_dumps_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let pair = translating_square(24, 20, 8, 1.0, 0.0).unwrap();
    let (a, b, t) = write_pair(dir.path(), &pair);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "frame0 = {}\nframe1 = {}\nground_truth = {}\nparts = 2\noverlap = 3\nschwarz_iters = 3\nadapt_iters = 2\n",
            s(&a),
            s(&b),
            s(&t)
        ),
    )
    .unwrap();
    let out = varflow(
        dir.path(),
        &[
            "--config",
            s(&cfg),
            "--out-metrics",
            "m.csv",
            "--dump-alpha",
            "alpha.png",
            "--dump-mt",
            "mt.png",
            "--ablation",
        ],
    );
    ok(&out);
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "run,aae_deg,ee_px,valid_pixels");
    assert!(lines[1].starts_with("illumination_on,") && lines[2].starts_with("illumination_off,"));
    for row in &lines[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert!(f[1].parse::<f64>().unwrap().is_finite() && f[2].parse::<f64>().unwrap().is_finite());
        assert_eq!(f[3], "480");
    }
    let alpha = load_image(dir.path().join("alpha.png")).unwrap();
    assert_eq!((alpha.width(), alpha.height()), (23, 19));
    let mt = load_image(dir.path().join("mt.png")).unwrap();
    assert_eq!((mt.width(), mt.height()), (24, 20));
    let inc = std::fs::read_to_string(dir.path().join("increments.csv")).unwrap();
    assert_eq!(inc.lines().count(), 4);
}

#[test]
fn fixture_gain_changes_the_first_frame_only() {
    let dir = tempfile::tempdir().unwrap();
    let pair = shifted_texture(16, 16, 0.0, 0.0).unwrap();
    let (a, _, _) = write_pair(dir.path(), &pair);
    let mut args = vec!["--frame0", s(&a), "--frame1", s(&a), "--make-illum-fixture", "1.2", "--dump-mt", "mt.png"];
    args.extend_from_slice(FAST);
    ok(&varflow(dir.path(), &args));
    // A pure gain between otherwise identical frames shows up in m_t.
    let mt = load_image(dir.path().join("mt.png")).unwrap();
    assert!(mt.data().iter().any(|&v| v < 0.99));
}
