use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--model.hidden", "12,6",
    "--train.epochs", "3",
    "--dataset.num_samples", "120",
    "--dataset.dim", "16",
    "--dataset.num_classes", "3",
    "--dataset.support", "8",
    "--dataset.separation", "0.6",
    "--dataset.noise", "0.2",
    "--structural.epochs", "20",
    "--structural.edge_samples", "2",
    "--setting.fgsm.eps", "0.2",
];

fn ipgrepair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipgrepair")).args(args).output().unwrap()
}

fn small_run(sub: &str, out: &Path) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec![sub, "--output_dir", out];
    args.extend_from_slice(SMALL);
    ipgrepair(&args)
}

#[test]
fn defaults_parse_back() {
    let out = ipgrepair(&["defaults"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("settings = benign, fgsm"));
    let cfg = ipgrepair::config::PipelineConfig::from_raw(&ipgrepair::config::RawConfig::parse(&text).unwrap()).unwrap();
    assert_eq!(cfg.targets().count(), 1);
}

#[test]
fn zero_targets_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ipgrepair(&["run", "--output_dir", dir.path().to_str().unwrap(), "--settings", "benign", "--setting.benign.attack", "benign"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target"));
}

#[test]
fn unknown_key_and_malformed_file() {
    let out = ipgrepair(&["run", "--repair.gamma", "1"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "seed = 1\nthis line has no separator\n").unwrap();
    let out = ipgrepair(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run("run", dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("tradeoff score"));
    for rel in [
        "config.txt",
        "model.json",
        "data/evaluate_fgsm-images.idx",
        "corpora/benign.ipgs",
        "corpora/fgsm.ipgs",
        "stats/node_stats.csv",
        "stats/layer_summaries.csv",
        "attribution/gnn.json",
        "attribution/influential.json",
        "actions.json",
        "eval/trace.csv",
        "eval/search.json",
        "eval/mre.json",
        "report.json",
        "manifest.json",
    ] {
        assert!(dir.path().join(rel).is_file(), "missing {rel}");
    }
}

#[test]
fn stages_resume_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [
        "train", "attack", "extract-ipg", "characterize", "train-gnn", "attribute", "gen-actions", "eval-actions", "report",
    ] {
        let out = small_run(stage, dir.path());
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let staged = std::fs::read(dir.path().join("actions.json")).unwrap();

    let whole = tempfile::tempdir().unwrap();
    assert!(small_run("run", whole.path()).status.success());
    assert_eq!(std::fs::read(whole.path().join("actions.json")).unwrap(), staged);
}

#[test]
fn later_stage_without_inputs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run("characterize", dir.path());
    assert_eq!(out.status.code(), Some(4));
}
