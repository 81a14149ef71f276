use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[dataset]
n_train = 24
n_test = 6
[image_vae]
hidden = [16]
latent_dim = 3
epochs = 2
batch_size = 8
[curve_vae]
hidden = [8]
latent_dim = 2
epochs = 3
batch_size = 8
[eval]
inverse_targets = 4
"#;

fn imgiv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imgiv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = imgiv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = imgiv(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_predict_invert() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (data, run) = (root.join("data"), root.join("run"));

    ok(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    assert!(data.join("images/00029.png").exists());
    assert!(data.join("curves/00000.csv").exists());

    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&run), "--passes", "1,1,0"]);
    assert!(run.join("models/stack.json").exists());
    let trace = fs::read_to_string(run.join("traces/image_vae.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("epoch,beta,recon,kl,total"));
    assert_eq!(trace.lines().count(), 3);
    assert_eq!(fs::read_to_string(run.join("traces/curve_vae.csv")).unwrap().lines().count(), 4);

    for mode in ["forward", "forward-hand-drawn", "inverse"] {
        let out = root.join(format!("eval-{mode}"));
        let line = ok(&[
            "eval", "--config", s(&cfg), "--stack", s(&run), "--dataset", s(&data),
            "--mode", mode, "--out", s(&out),
        ]);
        assert!(line.starts_with(mode));
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert!(report.get("r2_ion").is_some() && report.get("r2_ioff").is_some());
        assert!(out.join("records.csv").exists());
    }
    let again = root.join("eval-again");
    ok(&[
        "eval", "--config", s(&cfg), "--stack", s(&run), "--dataset", s(&data),
        "--mode", "inverse", "--out", s(&again),
    ]);
    assert_eq!(
        fs::read(root.join("eval-inverse/report.json")).unwrap(),
        fs::read(again.join("report.json")).unwrap()
    );

    let image = data.join("images/00025.png");
    let (p1, p2) = (root.join("p1"), root.join("p2"));
    ok(&["predict", "--stack", s(&run), "--image", s(&image), "--out", s(&p1)]);
    ok(&["predict", "--stack", s(&run), "--image", s(&image), "--out", s(&p2)]);
    assert_eq!(fs::read(p1.join("curve.csv")).unwrap(), fs::read(p2.join("curve.csv")).unwrap());
    assert!(fs::read_to_string(p1.join("overlay.svg")).unwrap().contains("<polyline"));

    let inv = root.join("inv");
    ok(&["invert", "--stack", s(&run), "--curve", s(&data.join("curves/00026.csv")), "--out", s(&inv)]);
    assert!(inv.join("design.png").exists());
    let params: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(inv.join("params.json")).unwrap()).unwrap();
    assert!(params.get("params").is_some());
}

#[test]
fn gen_is_reproducible_from_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "[dataset]\nn_train = 3\nn_test = 2\n").unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["gen", "--config", s(&cfg), "--seed", "8", "--out", s(&a)]);
    ok(&["gen", "--config", s(&cfg), "--seed", "8", "--out", s(&b)]);
    ok(&["gen", "--config", s(&cfg), "--seed", "9", "--out", s(&c)]);
    let manifest = |d: &Path| fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    assert_ne!(manifest(&a), manifest(&c));
    assert_eq!(fs::read(a.join("images/00004.png")).unwrap(), fs::read(b.join("images/00004.png")).unwrap());
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = tmp.path().join("out");

    let err = fails(&["eval", "--stack", s(&missing), "--dataset", s(&missing), "--mode", "forward", "--out", s(&out)]);
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.starts_with("imgiv: "));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[bridge]\nlamda = 1.0\n").unwrap();
    let err = fails(&["gen", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.contains("configuration"));

    let data = tmp.path().join("data");
    fs::write(&cfg, "[dataset]\nn_train = 2\nn_test = 1\n").unwrap();
    ok(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    fs::remove_file(data.join("curves/00001.csv")).unwrap();
    let err = fails(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&out)]);
    assert!(err.contains("item 1"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    assert!(!imgiv(&["eval", "--stack", "a", "--dataset", "b", "--mode", "sideways", "--out", "c"]).status.success());
    assert!(!imgiv(&["train", "--dataset", "b", "--out", "c", "--passes", "1,2"]).status.success());
}
