use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn partsep(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_partsep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) -> String {
    let out = partsep(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn chorales(n: usize, dir: &Path) -> Vec<PathBuf> {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/bach-chorales");
    let mut files: Vec<PathBuf> = fs::read_dir(&src).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .take(n)
        .map(|f| {
            let to = dir.join(f.file_name().unwrap());
            fs::copy(&f, &to).unwrap();
            to
        })
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_train_eval_separate() {
    let tmp = tempfile::tempdir().unwrap();
    let midi = tmp.path().join("midi");
    fs::create_dir(&midi).unwrap();
    let files = chorales(20, &midi);
    let dataset = tmp.path().join("small.dataset");
    let manifest = tmp.path().join("manifest.csv");

    // flags override the config file
    let config = tmp.path().join("ingest.cfg");
    fs::write(&config, "profile = quartet\nsplit_seed = 3\n").unwrap();
    let summary = ok(&[
        "ingest", "--config", s(&config), "--input", s(&midi), "--output", s(&dataset), "--manifest", s(&manifest),
        "--profile", "chorale",
    ]);
    assert!(summary.contains("files 20"), "{summary}");
    assert!(summary.contains("soprano|alto|tenor|bass"), "{summary}");
    assert!(manifest.exists());

    let runs = tmp.path().join("runs");
    let train = ok(&[
        "train", "--method", "mlp", "--dataset", s(&dataset), "--output-dir", s(&runs), "--set", "mlp_train.max_epochs=2",
    ]);
    assert!(train.contains("MLP"), "{train}");
    let tables: Vec<_> = fs::read_dir(&runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(tables.iter().any(|p| p.extension().is_some_and(|e| e == "csv")));
    let ckpt = tables.iter().find(|p| p.extension().is_some_and(|e| e == "ckpt")).expect("checkpoint written");

    // eval finds the checkpoint through the same settings and reports the same table
    let eval = ok(&[
        "eval", "--method", "mlp", "--dataset", s(&dataset), "--output-dir", s(&runs), "--set", "mlp_train.max_epochs=2",
    ]);
    assert_eq!(eval, train);
    let missing = partsep(&[
        "eval", "--method", "mlp", "--dataset", s(&dataset), "--output-dir", s(&runs), "--set", "mlp_train.max_epochs=3",
    ]);
    assert!(!missing.status.success());

    let out = tmp.path().join("out.mid");
    let roll = tmp.path().join("roll.png");
    let report = ok(&["separate", s(&files[0]), "-o", s(&out), "--model", s(ckpt), "--roll", s(&roll), "--profile", "chorale"]);
    assert!(report.contains("accuracy"), "{report}");
    assert!(fs::read(&out).unwrap().starts_with(b"MThd"));
    assert!(fs::read(&roll).unwrap().starts_with(b"\x89PNG"));

    let zones = ok(&[
        "separate", s(&files[1]), "-o", s(&out), "--method", "zones", "--dataset", s(&dataset), "--profile", "chorale",
    ]);
    assert!(zones.contains("accuracy"), "{zones}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = partsep(&["train", "--dataset", "nowhere.dataset"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no method"));
    let out = partsep(&["train", "--method", "mlp", "--set", "bogus"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("key=value"));
    let out = partsep(&["separate", "x.mid", "-o", "y.mid", "--method", "lstm", "--dataset", "d"]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_command_reports_every_check() {
    let text = ok(&["gradcheck", "--seed", "1"]);
    assert_eq!(text.lines().count(), 10, "{text}");
    assert!(text.contains("transformer_dec model"));
}
