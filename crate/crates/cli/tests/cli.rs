use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn retopo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retopo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn first_scan(root: &Path) -> std::path::PathBuf {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|d| d.join("meta.json").is_file())
        .collect();
    dirs.sort();
    dirs.remove(0)
}

#[test]
fn gen_render_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = retopo(&["gen", "--out", p(&data), "--count", "3", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").is_file());
    assert!(data.join("schema.json").is_file());

    let scan = first_scan(&data);
    let png = tmp.path().join("overlay.png");
    assert_eq!(retopo(&["render", "--scan", p(&scan), "--out", p(&png)]).status.code(), Some(0));
    assert!(png.is_file());
    let bad = tmp.path().join("overlay.gif");
    assert_eq!(retopo(&["render", "--scan", p(&scan), "--out", p(&bad)]).status.code(), Some(3));

    let schema = data.join("schema.json");
    let clean = retopo(&["audit", "--pred", p(&data), "--schema", p(&schema)]);
    assert_eq!(clean.status.code(), Some(0), "{}", String::from_utf8_lossy(&clean.stderr));

    // Swap the first two surfaces of one scan so ordering breaks.
    let table = scan.join("boundaries.csv");
    let text = fs::read_to_string(&table).unwrap();
    let mut rows: Vec<&str> = text.lines().collect();
    rows.swap(0, 1);
    fs::write(&table, rows.join("\n")).unwrap();
    let broken = retopo(&["audit", "--pred", p(&scan), "--schema", p(&schema)]);
    assert_eq!(broken.status.code(), Some(1));
    let err = String::from_utf8_lossy(&broken.stderr);
    assert!(err.contains("ordering: surface 0") && err.contains("column 0"), "{err}");
}

#[test]
fn generation_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(retopo(&["gen", "--out", p(d), "--count", "2", "--seed", "9", "--policy", "partial"]).status.code(), Some(0));
    }
    let sa = first_scan(&a);
    let sb = first_scan(&b);
    for f in ["image.pgm", "boundaries.csv", "meta.json"] {
        assert_eq!(fs::read(sa.join(f)).unwrap(), fs::read(sb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_single_op() {
    let out = retopo(&["gradcheck", "--op", "softmax_axis0", "--seed", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("softmax_axis0,") && l.ends_with("PASS")), "{text}");
    assert_eq!(retopo(&["gradcheck", "--op", "no_such_op"]).status.code(), Some(3));
}

#[test]
fn exit_codes_for_bad_input() {
    assert_eq!(retopo(&["gen", "--count", "2"]).status.code(), Some(3));
    assert_eq!(retopo(&["frobnicate"]).status.code(), Some(3));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    assert_eq!(retopo(&["audit", "--pred", p(&missing), "--schema", p(&missing)]).status.code(), Some(2));
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, "{\"epochs\": \"many\"}").unwrap();
    let out = tmp.path().join("abl");
    assert_eq!(retopo(&["ablate", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(3));
    fs::write(&cfg, "{}").unwrap();
    assert_eq!(retopo(&["ablate", "--config", p(&cfg), "--out", p(&out), "--arms", "-xyz"]).status.code(), Some(3));
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(retopo(&["gen", "--out", p(&data), "--count", "4", "--seed", "1", "--policy", "partial"]).status.code(), Some(0));
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"widths": [4, 8], "style_widths": [4, 4], "style_dim": 4, "batch_labeled": 2, "batch_unlabeled": 0,
            "val_count": 2, "epochs": 1, "spatial_augment": false}"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = retopo(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "series.csv", "validation.csv", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let ev = tmp.path().join("eval");
    let out = retopo(&["eval", "--ckpt", p(&run.join("checkpoint.bin")), "--data", p(&data), "--out", p(&ev)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    assert!(csv.starts_with("metric,name,value"));
    assert!(csv.contains("violations,ordering,0") && csv.contains("violations,confinement,0"), "{csv}");
    let preds = ev.join("predictions");
    let schema = data.join("schema.json");
    assert_eq!(retopo(&["audit", "--pred", p(&preds), "--schema", p(&schema)]).status.code(), Some(0));
}
