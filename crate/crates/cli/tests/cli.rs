use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3

[data]
size = 16

[denoiser]
base_channels = 4
levels = 2
time_embed_dim = 8
groups = 2
mask_hidden = 4

[sampler]
num_steps = 4

[train]
batch_size = 2
steps = 3
refine_steps = 2
refine_start = 0
checkpoint_every = 2

[oracle]
epochs = 1
batch_size = 4

[oracle.model]
channels = 4
groups = 2

[eval]
chunk = 3
downstream_seeds = 1

[eval.segmenter]
epochs = 1
batch_size = 4

[eval.segmenter.model]
channels = 4
groups = 2
"#;

fn maskdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskdiff"))
        .args(args)
        .output()
        .expect("spawn maskdiff")
}

fn ok(args: &[&str]) -> String {
    let out = maskdiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    maskdiff(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn manifest_lines(root: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(root.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_data_defaults_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["synth-data", "--out", s(&a)]);
    let items = manifest_lines(&a);
    let count = |split: &str| items.iter().filter(|v| v["split"] == split).count();
    assert_eq!((count("train"), count("test")), (200, 50));
    assert!(a.join("config.lock").exists());
    assert!(a.join("metrics.jsonl").exists());

    ok(&["synth-data", "--out", s(&b), "--n-train", "12", "--n-test", "4", "--seed", "9"]);
    let c = tmp.path().join("c");
    ok(&["synth-data", "--out", s(&c), "--n-train", "12", "--n-test", "4", "--seed", "9"]);
    let (tb, mut tc) = (tree(&b), tree(&c));
    assert_eq!(tb.len(), 12 * 2 + 4 * 2 + 3);
    // The lock records the output path; everything else must match byte for byte.
    let lock = PathBuf::from("config.lock");
    let (lb, lc) = (tb[&lock].clone(), tc.remove(&lock).unwrap());
    let mut tb = tb;
    tb.remove(&lock);
    assert_eq!(tb, tc);
    let strip = |v: Vec<u8>| String::from_utf8(v).unwrap().lines().filter(|l| !l.starts_with("out =")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(lb), strip(lc));
}

#[test]
fn config_lock_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    ok(&["synth-data", "--out", s(&first), "--n-train", "5", "--n-test", "2", "--size", "24", "--seed", "41"]);
    let again = tmp.path().join("again");
    ok(&["synth-data", "--config", s(&first.join("config.lock")), "--out", s(&again)]);
    let (mut a, mut b) = (tree(&first), tree(&again));
    a.remove(Path::new("config.lock"));
    b.remove(Path::new("config.lock"));
    assert_eq!(a, b);
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&["synth-data", "--out", s(&out), "--n-train", "0"]), 2);
    assert_eq!(code(&["synth-data", "--out", s(&out), "--bogus"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["train", "--out", s(&out)]), 2);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nstepz = 4\n").unwrap();
    assert_eq!(code(&["synth-data", "--config", s(&bad), "--out", s(&out)]), 2);
    fs::write(&bad, "[data]\nn_train = 0\n").unwrap();
    assert_eq!(code(&["synth-data", "--config", s(&bad), "--out", s(&out)]), 2);
}

#[test]
fn runtime_errors_exit_with_1() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let missing = tmp.path().join("missing");
    assert_eq!(code(&["train-oracle", "--data", s(&missing), "--out", s(&out)]), 1);
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    assert_eq!(code(&["synth-data", "--out", s(&out), "--n-train", "2", "--n-test", "1"]), 1);
    assert!(out.join("keep.txt").exists());
    ok(&["synth-data", "--out", s(&out), "--n-train", "2", "--n-test", "1", "--overwrite"]);
    assert!(!out.join("keep.txt").exists());
}

#[test]
fn grad_check_passes_on_fresh_init() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("gc");
    let stdout = ok(&["grad-check", "--out", s(&out)]);
    assert!(!stdout.contains("FAIL"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() >= 6);
    for c in checks {
        assert!(c["max_rel_err"].as_f64().unwrap() <= 1e-4, "{c}");
    }
}

#[test]
fn end_to_end_pipeline() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let cfg = tiny_config(t);
    let cfg = s(&cfg);
    let data = t.join("data");
    ok(&["synth-data", "--config", cfg, "--out", s(&data), "--n-train", "6", "--n-test", "4"]);

    let oracle_dir = t.join("oracle");
    ok(&["train-oracle", "--config", cfg, "--data", s(&data), "--out", s(&oracle_dir)]);
    let oracle = oracle_dir.join("oracle.ckpt");
    assert!(oracle.exists() && oracle_dir.join("eval.json").exists());

    // Baseline: only the conditional noise loss is logged.
    let base = t.join("base");
    ok(&["train", "--config", cfg, "--data", s(&data), "--ablation", "none", "--out", s(&base)]);
    let metrics: Vec<serde_json::Value> = fs::read_to_string(base.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(metrics.len(), 3);
    for m in &metrics {
        assert_eq!(m["noise_loss_kind"], "condition");
        assert!(m["loss_refine"].is_null());
        assert_eq!(m["loss_total"], m["loss_noise"]);
    }

    assert_eq!(
        code(&["train", "--config", cfg, "--data", s(&data), "--ablation", "both", "--out", s(&t.join("x"))]),
        2
    );
    let both = t.join("both");
    ok(&[
        "train", "--config", cfg, "--data", s(&data), "--ablation", "both", "--oracle", s(&oracle), "--out", s(&both),
    ]);
    assert!(both.join("step_000002.ckpt").exists());
    let resumed = t.join("resumed");
    ok(&[
        "train", "--config", cfg, "--data", s(&data), "--ablation", "both", "--oracle", s(&oracle), "--resume",
        s(&both.join("step_000002.ckpt")), "--out", s(&resumed),
    ]);
    assert_eq!(
        fs::read(both.join("final.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap()
    );

    let masks: Vec<PathBuf> = (0..4).map(|i| data.join(format!("masks/{i:05}.pgm"))).collect();
    let mut args = vec!["sample", "--config", cfg, "--ckpt"];
    let ckpt = both.join("final.ckpt");
    args.push(s(&ckpt));
    args.push("--masks");
    args.extend(masks.iter().map(|p| s(p)));
    let (s1, s2) = (t.join("s1"), t.join("s2"));
    let run = |out: &Path| {
        let mut a = args.clone();
        a.extend(["--out", s(out)]);
        ok(&a);
    };
    run(&s1);
    run(&s2);
    let ppm: Vec<_> = fs::read_dir(s1.join("images")).unwrap().collect();
    assert_eq!(ppm.len(), 4);
    let (mut t1, mut t2) = (tree(&s1), tree(&s2));
    t1.remove(Path::new("config.lock"));
    t2.remove(Path::new("config.lock"));
    assert_eq!(t1, t2);
    for i in 0..4 {
        assert_eq!(
            fs::read(s1.join(format!("masks/{i:05}.pgm"))).unwrap(),
            fs::read(&masks[i]).unwrap()
        );
    }

    let fid = t.join("fid");
    ok(&[
        "eval-fidelity", "--config", cfg, "--ckpt", s(&ckpt), "--oracle", s(&oracle), "--data", s(&data), "--out",
        s(&fid),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(fid.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["items"].as_array().unwrap().len(), 4);
    assert!(report["chance_dice"].is_number());
    assert!(fid.join("contact_sheet.ppm").exists());
    assert_eq!(
        code(&[
            "eval-fidelity", "--config", cfg, "--ckpt", s(&oracle), "--oracle", s(&oracle), "--data", s(&data),
            "--out", s(&t.join("wrong")),
        ]),
        1
    );

    let down = t.join("down");
    ok(&["eval-downstream", "--config", cfg, "--real", s(&data), "--synth", s(&s1), "--out", s(&down)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(down.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 1);
    assert!(report["median_delta_dice"].is_number());

    // Inputs are never touched, even with --overwrite pointing at them.
    let before = tree(&data);
    assert_eq!(
        code(&["train-oracle", "--config", cfg, "--data", s(&data), "--out", s(&data), "--overwrite"]),
        2
    );
    assert_eq!(tree(&data), before);
}
