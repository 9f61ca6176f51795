use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxygrad")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

fn pgm_pixels(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    // P5\n<w> <h>\n255\n
    let mut newlines = 0;
    let start = bytes
        .iter()
        .position(|&b| {
            newlines += (b == b'\n') as usize;
            newlines == 3
        })
        .unwrap();
    bytes[start + 1..].to_vec()
}

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn toy_f1_relu_keeps_negative_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["toy", "--problem", "f1", "--mode", "relu", "--height", "8", "--width", "8", "--iters", "50", "--outdir", out]);
    let init = column(&dir.path().join("pixels.csv"), "init");
    let fin = column(&dir.path().join("pixels.csv"), "final_value");
    for (a, b) in init.iter().zip(&fin) {
        let (a, b): (f64, f64) = (a.parse().unwrap(), b.parse().unwrap());
        if a < 0.0 {
            assert_eq!(a, b);
        } else {
            assert_eq!(b, 1.0);
        }
    }
    for f in ["manifest.json", "trajectory.csv", "init.pgm", "final.pgm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn toy_f3_proxygrad_final_image_is_white() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&[
        "toy", "--problem", "f3", "--mode", "proxygrad", "--slope-fwd", "0.1", "--slope-bwd", "0.5", "--height", "10",
        "--width", "10", "--lr", "0.1", "--iters", "200", "--outdir", out,
    ]);
    let px = pgm_pixels(&dir.path().join("final.pgm"));
    assert_eq!(px.len(), 100);
    assert!(px.iter().all(|&b| b >= 253), "{px:?}");
}

#[test]
fn toy_f2_crossing_matches_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&[
        "toy", "--problem", "f2", "--mode", "lrelu", "--slope-fwd", "0.1", "--slope-bwd", "0.1", "--height", "4",
        "--width", "4", "--lr", "0.01", "--iters", "700", "--background", "-0.5", "--init-noise", "0", "--outdir", out,
    ]);
    let crossings: Vec<usize> = column(&dir.path().join("pixels.csv"), "crossing")
        .iter()
        .map(|c| c.parse().unwrap())
        .collect();
    assert!(crossings.iter().all(|&c| (499..=501).contains(&c)), "{crossings:?}");
}

#[test]
fn toy_frames_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["toy", "--height", "4", "--width", "4", "--iters", "10", "--frame-stride", "5", "--outdir", out]);
    for t in [0, 5, 10] {
        assert!(dir.path().join(format!("frame_{t:05}.pgm")).exists());
    }
}

#[test]
fn moments_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["moments", "--mc-n", "100000", "--outdir", out]);
    let agree = column(&dir.path().join("moments.csv"), "agree");
    assert_eq!(agree.len(), 11);
    assert!(agree.iter().all(|a| a == "true"));
}

#[test]
fn gradmag_leaky_with_bn_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["gradmag", "--modes", "leaky,proxygrad", "--bn", "on", "--seeds", "10", "--outdir", out]);
    let modes = column(&dir.path().join("trends.csv"), "mode");
    let rho = column(&dir.path().join("trends.csv"), "spearman");
    for (m, r) in modes.iter().zip(&rho) {
        let r: f64 = r.parse().unwrap();
        match m.as_str() {
            "leaky" => assert_eq!(r, -1.0),
            "proxygrad" => assert_eq!(r, 1.0),
            other => panic!("{other}"),
        }
    }
}

#[test]
fn bnstd_writes_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["bnstd", "--seeds", "4", "--outdir", out]);
    let after = column(&dir.path().join("bnstd.csv"), "after_activation");
    assert!(after.iter().any(|a| a == "true"));
    assert!(after.iter().any(|a| a == "false"));
}

#[test]
fn train_proxygrad_slope_zero_matches_relu() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let common = ["train", "--n-per-class", "10", "--test-per-class", "4", "--epochs", "2"];
    let mut relu = common.to_vec();
    relu.extend(["--mode", "relu", "--outdir", a.path().to_str().unwrap()]);
    ok(&relu);
    let mut proxy = common.to_vec();
    proxy.extend(["--mode", "proxygrad", "--slope", "0", "--outdir", b.path().to_str().unwrap()]);
    ok(&proxy);
    assert_eq!(
        std::fs::read(a.path().join("history.csv")).unwrap(),
        std::fs::read(b.path().join("history.csv")).unwrap()
    );
}

#[test]
fn train_on_idx_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (fixture("four-images.idx3-ubyte"), fixture("four-labels.idx1-ubyte"));
    ok(&[
        "train", "--dataset", "idx", "--train-images", &img, "--train-labels", &lab, "--net", "cnn", "--epochs", "2",
        "--batch", "4", "--outdir", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(column(&dir.path().join("history.csv"), "epoch").len(), 2);
}

#[test]
fn am_on_json_specs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["am", "--net-spec", &fixture("tiny-net.json"), "--mode", "proxygrad", "--slope-bwd", "0.3", "--iters", "20", "--outdir", out]);
    assert!(dir.path().join("final.pgm").exists());
    let o = run(&["am", "--net-spec", &fixture("not-scalar.json"), "--outdir", out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["toy", "--mode", "sideways"]).status.code(), Some(2));
    assert_eq!(run(&["toy", "--problem", "f2", "--mode", "relu", "--outdir", out]).status.code(), Some(2));
    assert_eq!(run(&["moments", "--slopes", "1.5", "--outdir", out]).status.code(), Some(2));
    assert_eq!(run(&["nonsense"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["am", "--net-spec", "/nonexistent/net.json", "--outdir", out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train", "--n-per-class", "10", "--test-per-class", "0", "--epochs", "3", "--lr", "1e200", "--outdir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn replay_reproduces_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&["toy", "--problem", "f3", "--mode", "proxygrad", "--height", "6", "--width", "6", "--iters", "30", "--rot-deg", "5", "--seed", "4", "--outdir", a.path().to_str().unwrap()]);
    ok(&["replay", "--manifest", a.path().join("manifest.json").to_str().unwrap(), "--outdir", b.path().to_str().unwrap()]);
    for f in ["manifest.json", "trajectory.csv", "pixels.csv", "final.pgm"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
