use std::path::Path;
use std::process::{Command, Output};

use tdml::dataio::{read_embeddings, write_embeddings};
use tdml::numerics::norm;
use tdml::EmbeddingRecord;

fn tdml(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdml"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = tdml(args, cwd);
    assert!(
        out.status.success(),
        "tdml {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn small_data(dir: &Path) {
    ok(
        &["gen-data", "--classes", "4", "--per-class", "20", "--dim", "8", "--out", "d"],
        dir,
    );
}

const QUICK_TRAIN: [&str; 10] = [
    "train", "--data", "d/train.tdml", "--batch", "6", "--samples-per-class", "3", "--dense", "8,6", "--epochs",
];

#[test]
fn gen_data_writes_split_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--classes", "8", "--per-class", "100", "--split", "0.5", "--out", "a"], dir.path());
    let train = read_embeddings(&dir.path().join("a/train.tdml")).unwrap();
    let test = read_embeddings(&dir.path().join("a/test.tdml")).unwrap();
    assert_eq!((train.len(), test.len()), (400, 400));
    let manifest = std::fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap();
    for line in ["subcommand=gen-data", "seed=7", "classes=8", "split=0.5", "tool=tdml"] {
        assert!(manifest.lines().any(|l| l == line), "missing {line} in\n{manifest}");
    }

    ok(&["gen-data", "--classes", "8", "--per-class", "100", "--split", "0.5", "--out", "b"], dir.path());
    assert_eq!(bytes(dir.path().join("a/train.tdml")), bytes(dir.path().join("b/train.tdml")));
    assert_eq!(bytes(dir.path().join("a/test.tdml")), bytes(dir.path().join("b/test.tdml")));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = tdml(&["gen-data", "--classes", "3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--out") && err.contains("Usage"), "{err}");

    assert_eq!(tdml(&["gen-data", "--out", "x", "--split", "1.5"], dir.path()).status.code(), Some(2));
    assert_eq!(tdml(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(tdml(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = tdml(&["embed", "--checkpoint", "nope.tdck", "--data", "nope.tdml", "--out", "e.tdml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_defaults_and_single_class_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let mut args = QUICK_TRAIN.to_vec();
    args.extend(["2", "--lr", "0.00001", "--out", "m"]);
    ok(&args, dir.path());
    let manifest = std::fs::read_to_string(dir.path().join("m/manifest.txt")).unwrap();
    for line in ["margin=0.2", "lr=0.00001", "epochs=2", "normalization=sum", "seed=0"] {
        assert!(manifest.lines().any(|l| l == line), "missing {line} in\n{manifest}");
    }
    let history = std::fs::read_to_string(dir.path().join("m/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,mean_loss,active_fraction,batches\n"));

    let one_class: Vec<EmbeddingRecord> =
        (0..6).map(|i| EmbeddingRecord::new(format!("r{i}"), "only", vec![i as f64, 1.0])).collect();
    write_embeddings(&dir.path().join("one.tdml"), &one_class).unwrap();
    let out = tdml(&["train", "--data", "one.tdml", "--out", "m1", "--dense", "2"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no valid triplet"), "{err}");
}

#[test]
fn embed_outputs_unit_rows_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let mut args = QUICK_TRAIN.to_vec();
    args.extend(["3", "--out", "m"]);
    ok(&args, dir.path());
    let embed = ["embed", "--checkpoint", "m/checkpoint.tdck", "--data", "d/test.tdml"];
    ok(&[&embed[..], &["--out", "e1.tdml"]].concat(), dir.path());
    ok(&[&embed[..], &["--out", "e2.tdml"]].concat(), dir.path());
    assert_eq!(bytes(dir.path().join("e1.tdml")), bytes(dir.path().join("e2.tdml")));
    let e = read_embeddings(&dir.path().join("e1.tdml")).unwrap();
    assert_eq!(e.len(), 40);
    for r in &e {
        assert_eq!(r.vector.len(), 6);
        assert!((norm(&r.vector) - 1.0).abs() < 1e-6);
    }

    let mut args = QUICK_TRAIN.to_vec();
    args.extend(["1", "--fc-reduce", "4", "--out", "r"]);
    ok(&args, dir.path());
    ok(&["embed", "--checkpoint", "r/checkpoint.tdck", "--data", "d/test.tdml", "--out", "er.tdml"], dir.path());
    assert!(read_embeddings(&dir.path().join("er.tdml")).unwrap().iter().all(|r| r.vector.len() == 4));
}

#[test]
fn map_models_need_the_map_flag() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let mut args = QUICK_TRAIN.to_vec();
    args.extend(["1", "--map", "2x2", "--conv", "3", "--out", "c"]);
    ok(&args, dir.path());
    let out = tdml(&["embed", "--checkpoint", "c/checkpoint.tdck", "--data", "d/test.tdml", "--out", "e.tdml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    ok(
        &["embed", "--checkpoint", "c/checkpoint.tdck", "--data", "d/test.tdml", "--out", "e.tdml", "--map", "2x2"],
        dir.path(),
    );
    assert_eq!(tdml(&["train", "--data", "d/train.tdml", "--out", "x", "--conv", "3"], dir.path()).status.code(), Some(2));
}

#[test]
fn pca_fits_on_train_and_applies_to_test() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--classes", "4", "--per-class", "30", "--dim", "16", "--out", "d"], dir.path());
    ok(
        &["pca", "--fit", "d/train.tdml", "--apply", "d/test.tdml", "--k", "16", "--no-renorm", "--out", "full"],
        dir.path(),
    );
    let before = read_embeddings(&dir.path().join("d/test.tdml")).unwrap();
    let after = read_embeddings(&dir.path().join("full/test.tdml")).unwrap();
    // distances between 32-bit rounded inputs and 32-bit rounded outputs
    for i in 0..before.len() {
        for j in 0..i {
            let d0: f64 = before[i].vector.iter().zip(&before[j].vector).map(|(a, b)| (a - b) * (a - b)).sum();
            let d1: f64 = after[i].vector.iter().zip(&after[j].vector).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!((d0 - d1).abs() <= 1e-6 * d0.max(1.0), "{d0} vs {d1}");
        }
    }

    ok(&["pca", "--fit", "d/train.tdml", "--apply", "d/test.tdml", "--k", "8", "--out", "p8"], dir.path());
    let reduced = read_embeddings(&dir.path().join("p8/test.tdml")).unwrap();
    assert!(reduced.iter().all(|r| r.vector.len() == 8 && (norm(&r.vector) - 1.0).abs() < 1e-6));
    assert!(dir.path().join("p8/train.tdml").exists());

    let out = tdml(&["pca", "--fit", "d/train.tdml", "--k", "17", "--out", "bad"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

fn one_hot(classes: usize, per_class: usize) -> Vec<EmbeddingRecord> {
    (0..classes * per_class)
        .map(|i| {
            let mut v = vec![0.0; classes];
            v[i / per_class] = 1.0;
            EmbeddingRecord::new(format!("q{i:05}"), format!("class{:02}", i / per_class), v)
        })
        .collect()
}

#[test]
fn evaluate_text_and_json() {
    let dir = tempfile::tempdir().unwrap();
    write_embeddings(&dir.path().join("perfect.tdml"), &one_hot(21, 50)).unwrap();
    let out = ok(&["evaluate", "--data", "perfect.tdml"], dir.path());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("ANMRR 0.0000\nmAP 1.0000\n"), "{text}");
    assert!(text.lines().any(|l| l == "P@1000 0.0490"), "{text}");
    assert!(text.lines().any(|l| l == "ANMRR[class20] 0.0000"), "{text}");

    let out = ok(&["evaluate", "--data", "perfect.tdml", "--json"], dir.path());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["ANMRR"], 0.0);
    assert_eq!(json["mAP"], 1.0);
    assert_eq!(format!("{:.4}", json["precision"]["P@1000"].as_f64().unwrap()), "0.0490");
    assert_eq!(json["queries"], 1050);

    ok(&["evaluate", "--data", "perfect.tdml", "--out", "report.txt"], dir.path());
    assert_eq!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap(), text);
    assert!(dir.path().join("report.txt.manifest").exists());
}

#[test]
fn rerun_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let mut args = QUICK_TRAIN.to_vec();
    args.extend(["3", "--seed", "5", "--checkpoint-every", "2", "--out", "m"]);
    ok(&args, dir.path());
    ok(&["rerun", "m/manifest.txt", "--out", "m2"], dir.path());
    for f in ["checkpoint.tdck", "history.csv", "manifest.txt", "checkpoint-epoch-0002.tdck"] {
        let (a, b) = (bytes(dir.path().join("m").join(f)), bytes(dir.path().join("m2").join(f)));
        if f == "manifest.txt" {
            let a = String::from_utf8(a).unwrap().replace("out=m\n", "");
            let b = String::from_utf8(b).unwrap().replace("out=m2\n", "");
            assert_eq!(a, b);
        } else {
            assert_eq!(a, b, "{f} differs");
        }
    }

    ok(&["rerun", "d/manifest.txt", "--out", "d2"], dir.path());
    assert_eq!(bytes(dir.path().join("d/train.tdml")), bytes(dir.path().join("d2/train.tdml")));

    std::fs::write(dir.path().join("bogus.txt"), "tool=other\n").unwrap();
    assert_eq!(tdml(&["rerun", "bogus.txt"], dir.path()).status.code(), Some(2));
}

#[test]
fn csv_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    ok(&["export-csv", "--input", "d/test.tdml", "--out", "t.csv"], dir.path());
    ok(&["import-csv", "--input", "t.csv", "--out", "t.tdml"], dir.path());
    assert_eq!(bytes(dir.path().join("d/test.tdml")), bytes(dir.path().join("t.tdml")));
    std::fs::write(dir.path().join("bad.csv"), "id,label,f0\na,x,1.0\nb,y,oops\n").unwrap();
    let out = tdml(&["import-csv", "--input", "bad.csv", "--out", "bad.tdml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains('3'));
}
