use std::fs;
use std::path::Path;
use std::process::Command;

use apg_harness::metrics::{read_rows, HEADER};

fn apg(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_apg")).args(args).output().expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, model: &str, name: &str, count: &str, n: &str, m: &str) -> String {
    let stem = dir.join(name);
    let (code, text) = apg(&["generate", "--model", model, "--instances", count, "--n", n, "--m", m, "--seed", "5", "--out", s(&stem)]);
    assert_eq!(code, 0, "{text}");
    stem.to_string_lossy().into_owned()
}

fn config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn train_then_eval_writes_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(dir.path(), "gmm", "train", "6", "12", "3");
    let test = corpus(dir.path(), "gmm", "test", "2", "15", "3");
    let out = dir.path().join("run");
    let cfg = config(
        dir.path(),
        "c.toml",
        &format!(
            "model = \"gmm\"\nsweeps = 2\nparticles = 4\nbatch = 2\nsteps = 3\nlog_every = 1\nkl_instances = 2\ntrain_corpus = \"{train}\"\ntest_corpus = \"{test}\"\nout_dir = \"{}\"\n",
            out.display()
        ),
    );
    let (code, text) = apg(&["train", "--config", &cfg]);
    assert_eq!(code, 0, "{text}");
    assert!(out.join("config.toml").exists());
    assert_eq!(fs::read_to_string(out.join("latest.txt")).unwrap().trim(), "ckpt-0000003");
    let train_rows = read_rows(&out.join("metrics.csv")).unwrap();
    assert_eq!(train_rows.len(), 3);
    assert!(train_rows.iter().all(|r| r.kl_global.is_some() && r.step.is_some()));

    for (method, lf) in [("apg", None), ("rws", None), ("bpg", None), ("gibbs", None), ("hmc-rws", Some("3"))] {
        let csv = dir.path().join(format!("{method}.csv"));
        let dump = dir.path().join(format!("{method}.jsonl"));
        let ck = out.join("ckpt-0000003");
        let mut args = vec!["eval", "--checkpoint", s(&ck), "--method", method, "--sweeps", "3", "--particles", "4", "--seeds", "2"];
        args.extend(["--out", s(&csv), "--dump-latents", s(&dump)]);
        if let Some(lf) = lf {
            args.extend(["--lf", lf]);
        }
        let (code, text) = apg(&args);
        assert_eq!(code, 0, "{method}: {text}");
        assert_eq!(fs::read_to_string(&csv).unwrap().lines().next().unwrap(), HEADER);
        let rows = read_rows(&csv).unwrap();
        let per_run = if method == "rws" { 1 } else { 3 };
        assert_eq!(rows.len(), 2 * 2 * per_run, "{method}");
        let last = rows.last().unwrap();
        let budget = match method {
            "hmc-rws" => 4 + 2 * 4 * 3,
            "rws" => 12,
            _ => 12,
        };
        assert_eq!(last.log_joint_evals, budget, "{method}");
        assert_eq!(fs::read_to_string(&dump).unwrap().lines().count(), 4);
    }
}

#[test]
fn resume_is_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(dir.path(), "dmm", "train", "5", "10", "2");
    let body = |out: &str| {
        format!(
            "model = \"dmm\"\nsweeps = 2\nparticles = 3\nbatch = 2\nsteps = 6\ncheckpoint_every = 3\nlog_every = 2\nseed = 9\ntrain_corpus = \"{train}\"\nout_dir = \"{out}\"\n"
        )
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ca = config(dir.path(), "a.toml", &body(s(&a)));
    let cb = config(dir.path(), "b.toml", &body(s(&b)));
    assert_eq!(apg(&["train", "--config", &ca]).0, 0);
    assert_eq!(apg(&["train", "--config", &cb, "--override", "steps=3"]).0, 0);
    let resume = format!("resume=\"{}\"", b.join("ckpt-0000003").display());
    let (code, text) = apg(&["train", "--config", &cb, "--override", &resume]);
    assert_eq!(code, 0, "{text}");
    for part in ["phi", "theta"] {
        let x = fs::read(a.join(format!("ckpt-0000006-{part}.bin"))).unwrap();
        let y = fs::read(b.join(format!("ckpt-0000006-{part}.bin"))).unwrap();
        assert!(x == y, "{part} differs after resume");
    }
    let ra = read_rows(&a.join("metrics.csv")).unwrap();
    let rb = read_rows(&b.join("metrics.csv")).unwrap();
    let lj = |rows: &[apg_harness::metrics::MetricRow]| rows.iter().map(|r| (r.step, r.log_joint.to_bits())).collect::<Vec<_>>();
    assert_eq!(lj(&ra), lj(&rb));
}

#[test]
fn zero_steps_emit_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(dir.path(), "gmm", "train", "3", "8", "3");
    let out = dir.path().join("run");
    let cfg = config(dir.path(), "c.toml", &format!("steps = 0\ntrain_corpus = \"{train}\"\nout_dir = \"{}\"\n", out.display()));
    assert_eq!(apg(&["train", "--config", &cfg]).0, 0);
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["ckpt-0000000-phi.bin", "ckpt-0000000-phi.json", "config.toml", "latest.txt", "metrics.csv"]);
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().trim(), HEADER);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config(dir.path(), "bad.toml", "sweeps = 0\n");
    assert_eq!(apg(&["train", "--config", &bad]).0, 2);
    assert_eq!(apg(&["train", "--config", s(&dir.path().join("missing.toml"))]).0, 2);
    assert_eq!(apg(&["train", "--config", &bad, "--override", "nonsense"]).0, 2);
    assert_eq!(apg(&["bogus-subcommand"]).0, 2);
    let missing = dir.path().join("nope");
    let ck = s(&missing);
    assert_eq!(apg(&["eval", "--checkpoint", ck, "--method", "apg", "--sweeps", "2", "--particles", "2", "--out", "x.csv"]).0, 2);

    // A learning rate this large overflows the parameters within a few steps.
    let train = corpus(dir.path(), "gmm", "train", "4", "10", "3");
    let out = dir.path().join("run");
    let cfg = config(
        dir.path(),
        "nan.toml",
        &format!("sweeps = 2\nparticles = 4\nbatch = 2\nsteps = 50\nlr = 1e300\ntrain_corpus = \"{train}\"\nout_dir = \"{}\"\n", out.display()),
    );
    let (code, text) = apg(&["train", "--config", &cfg]);
    assert_eq!(code, 3, "{text}");
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("abort.json")).unwrap()).unwrap();
    assert!(dump["step"].is_u64() && dump["batch"].is_array());
}
