//! End-to-end runs of the `fairadapt` binary.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "train": {"encoder_widths": [16, 8], "gender_hidden": 8, "max_epochs": 3, "lr": 0.001},
  "data": {"synth": {"n_per_corpus": 300, "feature_dim": 8}},
  "matrix": {"emotions": ["anger"], "modes": ["baseline_src", "cfa"], "seeds": [0, 1, 2, 3, 4]}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fairadapt"));
    c.env_remove("FAIRADAPT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, CONFIG).unwrap();
    p.to_str().unwrap().to_owned()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["train", "--out", "x", "--seed", "1", "--seeds", "1,2"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("runs");
    let o = run(&["train", "--config", &cfg, "--mode", "nope", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = run(&["train", "--config", &cfg, "--decay-mode", "cosine", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn io_errors_exit_two_and_bad_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = run(&["probe", "--model", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\"layers\": [").unwrap();
    let o = run(&["probe", "--model", broken.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = run(&["report", "--runs", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn selftest_passes_and_catches_a_flipped_reversal() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = run(&["selftest", "--corrupt-grl-sign"]);
    assert_eq!(code(&o), 2);
    let all = format!("{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(all.contains("grl_invariant"), "{all}");
}

#[test]
fn synth_is_deterministic_and_carries_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"n_per_corpus": 40, "feature_dim": 4}"#).unwrap();
    let outs: Vec<_> = ["a", "b"].iter().map(|d| dir.path().join(d)).collect();
    for out in &outs {
        let o = run(&["synth", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["source.csv", "target.csv", "manifest.json"] {
        assert_eq!(read(&outs[0].join(f)), read(&outs[1].join(f)), "{f}");
    }
    let src = read(&outs[0].join("source.csv"));
    assert!(src.starts_with("# config {"), "{}", &src[..40]);
    assert!(src.lines().next().unwrap().contains("\"seed\":3"));
}

#[test]
fn train_then_report_writes_the_contracted_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let runs = dir.path().join("runs");
    let o = run(&["train", "--config", &cfg, "--out", runs.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for mode in ["baseline_src", "cfa"] {
        for seed in 0..5 {
            let cell = runs.join(mode).join("anger").join(format!("seed-{seed}"));
            for f in ["model.json", "runlog.jsonl", "report.json", "probe.json"] {
                assert!(cell.join(f).is_file(), "{}", cell.join(f).display());
            }
        }
    }

    let rep = dir.path().join("rep");
    let args = ["report", "--runs", runs.to_str().unwrap(), "--compare", "baseline_src", "cfa", "--out", rep.to_str().unwrap()];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&read(&rep.join("summary.json"))).unwrap();
    assert!(summary.get("config").is_some());
    let table = read(&rep.join("table.txt"));
    assert!(table.starts_with("# config"));
    assert!(table.contains("cfa") && table.contains("baseline_src"));

    // eval, probe and export on one checkpoint
    let model = runs.join("cfa/anger/seed-0/model.json");
    let model = model.to_str().unwrap();
    let eval = dir.path().join("eval.json");
    let o = run(&["eval", "--config", &cfg, "--model", model, "--out", eval.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&read(&eval)).unwrap();
    assert!(report.get("config").is_some());
    let probe = dir.path().join("probe.json");
    assert_eq!(code(&run(&["probe", "--config", &cfg, "--model", model, "--out", probe.to_str().unwrap()])), 0);
    let emb = dir.path().join("emb.csv");
    assert_eq!(code(&run(&["export-embeddings", "--config", &cfg, "--model", model, "--out", emb.to_str().unwrap()])), 0);
    let text = read(&emb);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config"));
    assert_eq!(lines.filter(|l| !l.starts_with('#')).count(), 1 + 600);
}

#[test]
fn reruns_produce_identical_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let mut summaries = Vec::new();
    for (name, jobs) in [("one", "1"), ("two", "2")] {
        let runs = dir.path().join(name);
        let o = run(&["train", "--config", &cfg, "--jobs", jobs, "--out", runs.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let rep = runs.join("report");
        assert_eq!(code(&run(&["report", "--runs", runs.to_str().unwrap(), "--out", rep.to_str().unwrap()])), 0);
        summaries.push(read(&rep.join("summary.json")));
        let cell = runs.join("cfa/anger/seed-2");
        summaries.push(read(&cell.join("report.json")) + &read(&cell.join("model.json")));
    }
    assert_eq!(summaries[0], summaries[2]);
    assert_eq!(summaries[1], summaries[3]);
}

#[test]
fn seed_comes_from_the_environment_when_no_flag_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let train = |out: &Path, env: Option<&str>, flag: Option<&str>| {
        let mut c = bin();
        c.args(["train", "--config", &cfg, "--mode", "cfa", "--out", out.to_str().unwrap()]);
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        if let Some(v) = env {
            c.env("FAIRADAPT_SEED", v);
        }
        c.output().unwrap()
    };
    let env_dir = dir.path().join("env");
    assert_eq!(code(&train(&env_dir, Some("7"), None)), 0);
    assert!(env_dir.join("cfa/anger/seed-7/report.json").is_file());

    let flag_dir = dir.path().join("flag");
    assert_eq!(code(&train(&flag_dir, Some("7"), Some("9"))), 0);
    assert!(flag_dir.join("cfa/anger/seed-9/report.json").is_file());
    assert!(!flag_dir.join("cfa/anger/seed-7").exists());

    let o = train(&dir.path().join("bad"), Some("seven"), None);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("FAIRADAPT_SEED"));
}
