use std::path::Path;
use std::process::{Command, Output};

use bcmq::dataset::Dataset;

fn bcmq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcmq")).args(args).output().expect("run bcmq binary")
}

fn last_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).lines().last().unwrap_or("").to_string()
}

fn gen_data(root: &Path, size: usize) -> String {
    let size = format!("dataset_size={size}");
    let out = bcmq(&["gen-data", "--out", root.to_str().unwrap(), "--seed", "5", "--set", &size]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    last_line(&out)
}

#[test]
fn missing_subcommand_is_usage_error() {
    assert_eq!(bcmq(&[]).status.code(), Some(2));
}

#[test]
fn unknown_override_key_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bcmq(&["gen-data", "--out", tmp.path().to_str().unwrap(), "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_of_range_value_is_invalid_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bcmq(&["gen-data", "--out", tmp.path().to_str().unwrap(), "--set", "dataset_size=0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn offline_training_requires_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bcmq(&["train", "--algo", "bcq", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_writes_requested_transitions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = gen_data(tmp.path(), 140);
    let ds = Dataset::load(&Path::new(&dir).join("dataset.bin")).unwrap();
    assert_eq!(ds.len(), 140);
    assert!(Path::new(&dir).join("manifest.json").exists());
}

#[test]
fn corrupt_dataset_is_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = gen_data(tmp.path(), 40);
    let path = Path::new(&dir).join("dataset.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    let out = bcmq(&[
        "train",
        "--algo",
        "bcq",
        "--dataset",
        path.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_checkpoint_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.bin");
    let out = bcmq(&[
        "eval",
        "--mode",
        "bcmq",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn eval_writes_csv_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bcmq(&[
        "eval",
        "--mode",
        "random",
        "--out",
        tmp.path().to_str().unwrap(),
        "--set",
        "final_eval_episodes=4",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = last_line(&out);
    let returns = std::fs::read_to_string(Path::new(&dir).join("returns.csv")).unwrap();
    assert_eq!(returns.lines().next(), Some("episode,return"));
    assert_eq!(returns.lines().count(), 5);
    let ccdf = std::fs::read_to_string(Path::new(&dir).join("ccdf.csv")).unwrap();
    assert_eq!(ccdf.lines().next(), Some("snr_db,ccdf"));
}
