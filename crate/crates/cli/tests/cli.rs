use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hybridseq::model::load_checkpoint;
use hybridseq::profiler::{analyze, read_csv, read_json};
use serde_json::Value;

const TINY: &str = "\
teacher_steps = 2
eval_instances = 4
M = 16
N = 2
classes = 3
needles = 1
d = 16
layers = 1
heads = 2
vocab = 8
ssm_heads = 2
n_state = 4
steps = 2
batch = 2
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hybridseq"));
    c.env_remove("HYBRIDSEQ_SEED");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn train_pretrain_writes_checkpoint_log_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let o = run(bin().args(["train", "--config", &cfg, "--stage", "pretrain", "--lambda", "0", "--out"]).arg(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model = load_checkpoint(out.join("model.ckpt")).unwrap();
    assert_eq!(model.config.d, 16);
    assert!(model.config.ca_from_sa);
    let log = fs::read_to_string(out.join("train.log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["stage"], "pretrain");
    assert!(first["distill_loss"].is_null());
    let m = manifest(&out);
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 0);
    let kinds: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["checkpoint", "log", "checkpoint", "log"]);
    assert!(m["config"].as_str().unwrap().contains("lambda = 0"));
    assert_eq!(m["formats"]["checkpoint"], 1);
}

#[test]
fn instruct_with_distillation_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = run(bin()
        .args(["train", "--config", &cfg, "--stage", "instruct", "--lambda", "0.5", "--out"])
        .arg(tmp.path().join("r")));
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
}

#[test]
fn reruns_and_replays_are_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for dir in [&a, &b] {
        assert_eq!(code(&run(bin().args(["train", "--config", &cfg, "--seed", "7", "--out"]).arg(dir))), 0);
    }
    let replay = run(bin().arg("replay").arg(a.join("manifest.json")).arg("--out").arg(&c).env("HYBRIDSEQ_SEED", "99"));
    assert_eq!(code(&replay), 0, "{}", String::from_utf8_lossy(&replay.stderr));
    for f in ["model.ckpt", "teacher.ckpt", "train.log.ndjson", "teacher.log.ndjson"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(x, fs::read(c.join(f)).unwrap(), "{f}");
    }
    let (ma, mc) = (manifest(&a), manifest(&c));
    assert_eq!(ma["config"], mc["config"]);
    let digests =
        |m: &Value| m["artifacts"].as_array().unwrap().iter().map(|x| x["sha256"].clone()).collect::<Vec<_>>();
    assert_eq!(digests(&ma), digests(&mc));
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("s.cfg");
    fs::write(&cfg, format!("{TINY}seed = 3\n")).unwrap();
    let seed_of = |extra: &[&str], env: Option<&str>, name: &str| {
        let out = tmp.path().join(name);
        let mut c = bin();
        c.args(["train", "--config"]).arg(&cfg).args(extra).arg("--out").arg(&out);
        if let Some(e) = env {
            c.env("HYBRIDSEQ_SEED", e);
        }
        assert_eq!(code(&run(&mut c)), 0);
        manifest(&out)["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&[], None, "file"), 3);
    assert_eq!(seed_of(&[], Some("11"), "env"), 11);
    assert_eq!(seed_of(&["--seed", "12"], Some("11"), "flag"), 12);
}

#[test]
fn invalid_config_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "d = 16\n\nlayers = two\n").unwrap();
    let o = run(bin().arg("train").arg("--config").arg(&cfg).arg("--out").arg(tmp.path().join("r")));
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("bad.cfg"), "{err}");
    fs::write(&cfg, "colour = blue\n").unwrap();
    let o = run(bin().arg("train").arg("--config").arg(&cfg).arg("--out").arg(tmp.path().join("r")));
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["bench", "--M", "1024:16384:y2", "--out", "x"][..],
        &["bench", "--M", "16:8:x2", "--out", "x"],
        &["train", "--block", "mamba3"],
        &["train", "--M", "1:4:x2", "--out", "x"],
        &["frobnicate"],
    ] {
        let o = run(bin().args(args));
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hot.cfg");
    fs::write(&cfg, format!("{TINY}lr = 1e300\ngrad_clip = 0\n")).unwrap();
    let o =
        run(bin().args(["train", "--arch", "baseline", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("r")));
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn bench_both_arches_and_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let o = run(bin()
        .args(["bench", "--arch", "both", "--M", "1024:16384:x2", "--N", "64", "--no-timing", "--out"])
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(fs::File::open(out.join("bench.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows, read_json(fs::File::open(out.join("bench.json")).unwrap()).unwrap());
    assert_eq!(rows.iter().filter(|r| r.arch == "baseline").count(), 5);
    assert!(rows.iter().all(|r| r.n == 64 && r.d == 64 && r.layers == 2));
    let fits = analyze(&rows).unwrap();
    assert!((fits[0].flops.slope - 2.0).abs() < 0.15, "{:?}", fits[0]);
    assert!((fits[1].flops.slope - 1.0).abs() < 0.1, "{:?}", fits[1]);

    let a = run(bin().arg("analyze").arg(out.join("bench.csv")).arg("--out").arg(tmp.path().join("fit.json")));
    assert_eq!(code(&a), 0);
    let text = String::from_utf8_lossy(&a.stdout);
    assert!(text.contains("baseline") && text.contains("hybrid"), "{text}");
    let fit: Value = serde_json::from_slice(&fs::read(tmp.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit[0]["arch"], "baseline");
    assert_eq!(manifest(&out)["artifacts"].as_array().unwrap().len(), 2);
}

#[test]
fn bench_timed_small_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let args = [
        "bench",
        "--arch",
        "hybrid",
        "--M",
        "8,16",
        "--N",
        "2,3",
        "--d",
        "16",
        "--layers",
        "1",
        "--repeats",
        "3",
        "--out",
    ];
    let o = run(bin().args(args).arg(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(fs::File::open(out.join("bench.csv")).unwrap()).unwrap();
    let points: Vec<(usize, usize)> = rows.iter().map(|r| (r.m, r.n)).collect();
    assert_eq!(points, [(8, 2), (16, 2), (8, 3), (16, 3)]);
    assert!(rows.iter().all(|r| r.wall_ms_median.is_some() && r.repeats == 3));
}

#[test]
fn eval_reports_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run_dir = tmp.path().join("r");
    assert_eq!(code(&run(bin().args(["train", "--config", &cfg, "--out"]).arg(&run_dir))), 0);
    let out = tmp.path().join("e");
    let o = run(bin()
        .args(["eval", "--config", &cfg, "--checkpoint"])
        .arg(run_dir.join("model.ckpt"))
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["report"]["instances"], 4);
    assert!((v["chance"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(manifest(&out)["inputs"].as_array().unwrap().len(), 1);
    let missing = run(bin().args(["eval", "--checkpoint"]).arg(tmp.path().join("nope.ckpt")));
    assert_eq!(code(&missing), 3);
}

#[test]
fn instruct_continues_from_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let s1 = tmp.path().join("s1");
    assert_eq!(code(&run(bin().args(["train", "--config", &cfg, "--out"]).arg(&s1))), 0);
    let s2 = tmp.path().join("s2");
    let o = run(bin()
        .args(["train", "--config", &cfg, "--stage", "instruct", "--from"])
        .arg(s1.join("model.ckpt"))
        .arg("--out")
        .arg(&s2));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!s2.join("teacher.ckpt").exists());
    let log = fs::read_to_string(s2.join("train.log.ndjson")).unwrap();
    assert!(log.contains("\"instruct\""));
}

#[test]
fn sweeps_cover_their_axes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    for (axis, labels) in [
        ("block_variant", vec!["B", "C", "D"]),
        ("ca_from_sa", vec!["A", "-", "-", "B", "C", "D"]),
        ("lambda", vec!["D λ=0", "D λ=0.001", "D λ=0.01", "D λ=0.5", "D λ=1", "D λ=2"]),
    ] {
        let out = tmp.path().join(axis);
        let o = run(bin().args(["sweep", "--config", &cfg, "--axis", axis, "--out"]).arg(&out));
        assert_eq!(code(&o), 0, "{axis}: {}", String::from_utf8_lossy(&o.stderr));
        let v: Value = serde_json::from_slice(&fs::read(out.join("sweep.json")).unwrap()).unwrap();
        let got: Vec<&str> = v["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
        assert_eq!(got, labels, "{axis}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("init_loss"));
    }
}
