use std::path::Path;
use std::process::{Command, Output};

use latent_align::io;
use latent_align_core::synthetic::{NoiseWeights, SharedLatentCorpus};
use latent_align_core::{EmbeddingSet, Manifest, Matrix, PairedCorpus};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-align"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn to_set(m: &Matrix) -> EmbeddingSet {
    let data = (0..m.rows())
        .flat_map(|i| m.row(i).iter().map(|&x| x as f32))
        .collect();
    EmbeddingSet::new(m.rows(), m.cols(), data, false).unwrap()
}

fn write_pairs(dir: &Path, n: usize, split: u64) {
    let (v, t) = SharedLatentCorpus::new(3, 8, 32, 12, 10, NoiseWeights { w1: 0.0, w2: 0.0 })
        .sample(1, split, n);
    let corpus = PairedCorpus::new(to_set(&v), to_set(&t), Manifest::sequential(n)).unwrap();
    io::write_pairs_dir(dir, &corpus).unwrap();
}

#[test]
fn usage_errors_exit_two() {
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["cka", "--a", "x.embf"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_domain_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.embf");
    let out = run(tmp.path(), &["inspect", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn toy_sweep_csv_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("sweep.csv");
    let args = [
        "toy-sweep",
        "--instances",
        "4",
        "--csv",
        csv.to_str().unwrap(),
    ];
    let a = run(tmp.path(), &args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let first = std::fs::read(&csv).unwrap();
    let b = run(tmp.path(), &args);
    assert!(b.status.success());
    assert_eq!(first, std::fs::read(&csv).unwrap());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().count(), 5, "{text}");
}

#[test]
fn cka_of_a_set_with_itself_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("pairs");
    write_pairs(&pairs, 40, 0);
    let v = pairs.join(io::VISION_FILE);
    let t = pairs.join(io::TEXT_FILE);
    let same = ok_json(&run(
        tmp.path(),
        &[
            "cka",
            "--a",
            v.to_str().unwrap(),
            "--b",
            v.to_str().unwrap(),
        ],
    ));
    assert!((same["cka"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{same}");
    assert_eq!(same["n"], 40);

    let cross = ok_json(&run(
        tmp.path(),
        &[
            "cka",
            "--a",
            v.to_str().unwrap(),
            "--b",
            t.to_str().unwrap(),
            "--kernel",
            "rbf-median",
        ],
    ));
    let c = cross["cka"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c), "{cross}");
}

#[test]
fn run_manifest_replays_the_same_command() {
    let tmp = tempfile::tempdir().unwrap();
    let first = run(
        tmp.path(),
        &["toy-sweep", "--instances", "3", "--seed", "11"],
    );
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let manifest = tmp.path().join("run.json");
    let recorded: Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(recorded["command"]["name"], "toy-sweep");

    let replay_dir = tmp.path().join("replay");
    let second = bin()
        .arg("--out-dir")
        .arg(&replay_dir)
        .arg("--config")
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(
        second.status.success(),
        "{}",
        String::from_utf8_lossy(&second.stderr)
    );
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn train_then_evaluate_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("train");
    let held = tmp.path().join("held");
    write_pairs(&train, 120, 0);
    write_pairs(&held, 60, 1);
    let ck = tmp.path().join("model.ckpt");
    let report = ok_json(&run(
        tmp.path(),
        &[
            "-q",
            "train",
            "--pairs",
            train.to_str().unwrap(),
            "--d-out",
            "8",
            "--hidden",
            "16",
            "--batch",
            "32",
            "--epochs",
            "20",
            "--lr",
            "1e-2",
            "--out-checkpoint",
            ck.to_str().unwrap(),
        ],
    ));
    assert_eq!(report["pairs"], 120);
    assert!(ck.exists());

    let eval = ok_json(&run(
        tmp.path(),
        &[
            "eval-retrieve",
            "--pairs",
            held.to_str().unwrap(),
            "--checkpoint",
            ck.to_str().unwrap(),
            "--ks",
            "1,10",
        ],
    ));
    assert_eq!(eval["n"], 60);
    let r10 = eval["i2t"]["10"].as_f64().unwrap();
    let r1 = eval["i2t"]["1"].as_f64().unwrap();
    assert!(r1 <= r10);
    // Chance for recall@10 over 60 items is 1/6.
    assert!(r10 > 0.5, "{eval}");

    let info = ok_json(&run(tmp.path(), &["inspect", ck.to_str().unwrap()]));
    assert_eq!(info["kind"], "checkpoint");
    assert_eq!(info["trainable_params"], report["trainable_params"]);

    let listing = ok_json(&run(tmp.path(), &["inspect", held.to_str().unwrap()]));
    assert_eq!(listing["files"]["vision.embf"]["count"], 60);
    assert_eq!(listing["files"]["manifest.jsonl"]["lines"], 60);
}
