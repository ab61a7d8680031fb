use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparse_mt::config::{Preset, RunConfig};
use sparse_mt::inference::EvalReport;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparse-mt"));
    c.env_remove("SPARSE_MT_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_config(dir: &Path, steps: usize, lr: f64) -> String {
    let mut c = RunConfig::preset(Preset::Desk);
    for v in c.data.corpus.tier_sizes.values_mut() {
        *v /= 20;
    }
    c.data.corpus.valid_per_direction = 10;
    c.data.corpus.test_per_direction = 12;
    c.train.steps = steps;
    c.train.phase_switch = steps / 3;
    c.train.lr = lr;
    c.train.warmup = 5;
    let path = dir.join("run.toml");
    fs::write(&path, c.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn report(path: &Path) -> EvalReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_fail_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("never");
    let out = run(&[
        "eval",
        "--model",
        tmp.path().join("absent").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!out_dir.exists());
    let out = run(&["train", "--config", tmp.path().join("absent.toml").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn invalid_config_touches_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 10, 1e-3);
    let broken = fs::read_to_string(&cfg).unwrap().replace("steps = 10", "steps = 0");
    fs::write(&cfg, broken).unwrap();
    let out_dir = tmp.path().join("run");
    let out = run(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration"));
    assert!(!out_dir.exists());

    fs::write(&cfg, "[model]\nd = 3\n").unwrap();
    let out = run(&["gen-data", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!out_dir.exists());
}

#[test]
fn thread_variable_must_be_positive() {
    let out = bin().args(["gen-data", "--out", "/nonexistent/x"]).env("SPARSE_MT_THREADS", "0").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SPARSE_MT_THREADS"));
}

#[test]
fn untrained_model_scores_near_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 1, 0.0);
    let run_dir = tmp.path().join("run");
    ok(&run(&["train", "--config", &cfg, "--out", run_dir.to_str().unwrap()]));
    let eval_dir = tmp.path().join("eval");
    ok(&run(&[
        "eval",
        "--config",
        &cfg,
        "--model",
        run_dir.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]));
    let r = report(&eval_dir.join("report.json"));
    assert!(r.averages["all"] < 5.0, "{:?}", r.averages);
}

#[test]
fn pipeline_from_corpus_to_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let cfg = small_config(tmp.path(), 60, 5e-3);

    ok(&run(&["gen-data", "--config", &cfg, "--out", &p("data")]));
    assert!(tmp.path().join("data/corpus.json").exists());

    let out = bin()
        .args(["train", "--config", &cfg, "--data", &p("data"), "--out", &p("run")])
        .env("SPARSE_MT_THREADS", "2")
        .output()
        .unwrap();
    ok(&out);
    for f in ["train.jsonl", "scores.csv", "config.toml", "final/manifest.json", "final/tensors.bin"] {
        assert!(tmp.path().join("run").join(f).exists(), "{f}");
    }

    let eval = |mode: &str, model: &str, out: &str| {
        let o = run(&[
            "eval", "--config", &cfg, "--data", &p("data"), "--model", model, "--mode", mode, "--out", out,
        ]);
        ok(&o);
        o
    };
    let table = eval("extracted", &p("run"), &p("eval-x"));
    let text = String::from_utf8_lossy(&table.stdout);
    assert!(text.contains("#Params(M)") && text.contains("BLEU"));
    let x = report(&tmp.path().join("eval-x/report.json"));
    eval("hard", &p("run"), &p("eval-h"));
    let h = report(&tmp.path().join("eval-h/report.json"));
    assert_eq!(x.directions, h.directions);
    assert!(x.params.active < x.params.total);

    ok(&run(&["extract", "--config", &cfg, "--model", &p("run"), "--out", &p("ex")]));
    assert!(tmp.path().join("ex/mask.json").exists());
    let d = &h.directions[0];
    let pair = tmp.path().join("ex").join(format!("{}-{}", d.src, d.tgt));
    eval("extracted", pair.to_str().unwrap(), &p("eval-pair"));
    let single = report(&tmp.path().join("eval-pair/report.json"));
    assert_eq!(single.directions, vec![d.clone()]);

    let analyze = |out: &str| {
        ok(&run(&[
            "analyze",
            "--config",
            &cfg,
            "--data",
            &p("data"),
            "--model",
            &p("run"),
            "--report",
            &p("eval-h/report.json"),
            "--out",
            out,
        ]))
    };
    analyze(&p("an1"));
    analyze(&p("an2"));
    for f in ["pca.csv", "pca.svg", "pca.json", "overlap.csv", "overlap.json", "tiers.json"] {
        let a = fs::read(tmp.path().join("an1").join(f)).unwrap();
        assert_eq!(a, fs::read(tmp.path().join("an2").join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(tmp.path().join("an1/pca.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("language,x,y"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let out = run(&["verify"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}
