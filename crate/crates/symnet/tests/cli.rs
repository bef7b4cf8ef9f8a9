//! End-to-end tests of the `symnet` binary: artifacts, determinism,
//! error reporting, and the eval/verify/compare verbs on micro runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn symnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_symnet"))
}

fn micro_config(dir: &Path, symbiosis: bool) -> PathBuf {
    let text = format!(
        r#"
[model]
d_model = 16
n_heads = 2
d_ffn = 32
max_len = 16
dropout_p = 0.1

[symbiosis]
enabled = {symbiosis}
m = 2
o = 1
d = 1

[train]
stage1_steps = 12
stage2_steps = 6
warmup_steps = 10
batch_token_budget = 32
seed = 5

[data]
task = "copy"
vocab_size = 12
len_min = 2
len_max = 4
pairs = 60
seed = 5

[beam]
beam_size = 2
max_decode_len = 8

[output]
dir = "{}"
"#,
        dir.join("run").display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn dry_run_prints_layer_map_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path(), true);
    let out = run_ok(symnet().args(["train", "--dry-run", "--config"]).arg(&cfg));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("layer map: [0]"), "{stdout}");
    assert!(
        !tmp.path().join("run").exists(),
        "dry run must not create the run dir"
    );
}

#[test]
fn train_writes_exactly_the_expected_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path(), true);
    run_ok(symnet().args(["train", "--config"]).arg(&cfg));
    let run_dir = tmp.path().join("run");
    let mut names: Vec<String> = fs::read_dir(&run_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for required in [
        "manifest.json",
        "config.toml",
        "metrics.jsonl",
        "ckpt-final.symb",
    ] {
        assert!(
            names.contains(&required.to_string()),
            "missing {required}: {names:?}"
        );
    }
    for name in &names {
        assert!(
            name == "manifest.json"
                || name == "config.toml"
                || name == "metrics.jsonl"
                || (name.starts_with("ckpt-")
                    && (name.ends_with(".symb") || name.ends_with(".opt"))),
            "unexpected artifact {name}"
        );
    }
    // manifest is finalized: wall clock and final metrics present
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["finished_unix"].is_u64());
    assert!(manifest["final_metrics"]["loss"].is_f64());
    assert_eq!(manifest["layer_map"], serde_json::json!([0]));
    // metrics stream carries the full schema
    let first_line = fs::read_to_string(run_dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let rec: serde_json::Value = serde_json::from_str(&first_line).unwrap();
    for key in [
        "step",
        "stage",
        "lr",
        "nll_m",
        "nll_s",
        "margin_mean",
        "hinge_active_frac",
        "loss",
    ] {
        assert!(rec.get(key).is_some(), "metrics record lacks {key}");
    }

    // every produced checkpoint evaluates
    for name in names.iter().filter(|n| n.ends_with(".symb")) {
        let out = run_ok(
            symnet()
                .args(["eval", "--config"])
                .arg(&cfg)
                .arg("--checkpoint")
                .arg(run_dir.join(name)),
        );
        let report: serde_json::Value =
            serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
        assert!(report["bleu"].is_f64());
        assert!(report["token_acc"].is_f64());
    }

    // the S-Net is a complete model: --subnet evaluates
    run_ok(
        symnet()
            .args(["eval", "--subnet", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(run_dir.join("ckpt-final.symb")),
    );

    // sharing verification on the produced checkpoint
    let out = run_ok(
        symnet()
            .args(["verify", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(run_dir.join("ckpt-final.symb")),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("sharing verified"));
}

#[test]
fn same_config_and_seed_yield_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path(), true);
    let run = |out: &Path| {
        let status = symnet()
            .args(["train", "--config"])
            .arg(&cfg)
            .env("SYMNET_OUT_DIR", out)
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(out.join("ckpt-final.symb")).unwrap()
    };
    let a = run(&tmp.path().join("a"));
    let b = run(&tmp.path().join("b"));
    assert_eq!(a, b, "bit-identical final checkpoints expected");
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path(), true);
    let run = |out: &Path, seed: Option<&str>| {
        let mut c = symnet();
        c.args(["train", "--config"])
            .arg(&cfg)
            .env("SYMNET_OUT_DIR", out);
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        assert!(c.status().unwrap().success());
        fs::read(out.join("ckpt-final.symb")).unwrap()
    };
    let base = run(&tmp.path().join("base"), None);
    let reseeded = run(&tmp.path().join("re"), Some("99"));
    assert_ne!(base, reseeded, "a different seed must change the run");
}

#[test]
fn avg_last_one_equals_direct_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path(), true);
    run_ok(symnet().args(["train", "--config"]).arg(&cfg));
    let ck = tmp.path().join("run/ckpt-final.symb");
    let direct = run_ok(
        symnet()
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(&ck),
    );
    let avg1 = run_ok(
        symnet()
            .args(["eval", "--avg-last", "1", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(&ck),
    );
    assert_eq!(direct.stdout, avg1.stdout);
}

#[test]
fn invalid_config_fails_with_field_message() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[train]\ntau = -1.0\n").unwrap();
    let out = symnet()
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));

    fs::write(&path, "[train]\nmystery_knob = 3\n").unwrap();
    let out = symnet()
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery_knob"));
}

#[test]
fn compare_single_depth_single_seed_renders_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("compare.toml");
    fs::write(
        &cfg_path,
        format!(
            r#"
[model]
d_model = 16
n_heads = 2
d_ffn = 32
max_len = 16

[symbiosis]
m = 2
o = 1
d = 1

[train]
stage1_steps = 10
stage2_steps = 4
warmup_steps = 8
batch_token_budget = 32
seed = 3

[data]
task = "copy"
vocab_size = 12
len_min = 2
len_max = 4
pairs = 60
seed = 3

[beam]
beam_size = 2
max_decode_len = 8

[output]
dir = "{}"

[compare]
depths = [[2, 1]]
seeds = [3]
"#,
            tmp.path().join("sweep").display()
        ),
    )
    .unwrap();
    let out = run_ok(symnet().args(["compare", "--config"]).arg(&cfg_path));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout
        .lines()
        .filter(|l| l.trim_start().starts_with('2'))
        .collect();
    assert_eq!(rows.len(), 1, "{stdout}");
    // delta column is populated (symbiosis - classic)
    let sweep = tmp.path().join("sweep/compare");
    assert!(sweep.join("table.txt").exists());
    let cells = fs::read_to_string(sweep.join("compare.jsonl")).unwrap();
    assert_eq!(cells.lines().count(), 2, "one classic + one symbiosis cell");
    let table = fs::read_to_string(sweep.join("table.txt")).unwrap();
    assert!(!table.contains("FAILED"), "{table}");
}

#[test]
fn eval_writes_decoded_sentences() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path(), true);
    run_ok(symnet().args(["train", "--config"]).arg(&cfg));
    let decoded = tmp.path().join("decoded.txt");
    run_ok(
        symnet()
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(tmp.path().join("run/ckpt-final.symb"))
            .arg("--decoded-out")
            .arg(&decoded),
    );
    let text = fs::read_to_string(&decoded).unwrap();
    // one line per evaluated test sentence
    let report = run_ok(
        symnet()
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(tmp.path().join("run/ckpt-final.symb")),
    );
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&report.stdout)).unwrap();
    assert_eq!(text.lines().count() as u64, report["n_sentences"].as_u64().unwrap());
}

#[test]
fn divergence_aborts_nonzero_and_preserves_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("diverge.toml");
    fs::write(
        &cfg_path,
        format!(
            r#"
[model]
d_model = 16
n_heads = 2
d_ffn = 32
max_len = 16

[symbiosis]
m = 2
o = 1
d = 1

[train]
stage1_steps = 200
stage2_steps = 0
warmup_steps = 2
lr_peak = 1e18
lr_floor = 1e-7
batch_token_budget = 32
seed = 5

[data]
task = "copy"
vocab_size = 12
len_min = 2
len_max = 3
pairs = 4
seed = 5

[output]
dir = "{}"
"#,
            tmp.path().join("run").display()
        ),
    )
    .unwrap();
    let out = symnet().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(!out.status.success(), "divergence must exit nonzero");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("diverged"), "{stderr}");
    // artifacts written before the abort stay on disk
    let run_dir = tmp.path().join("run");
    assert!(run_dir.join("manifest.json").exists());
    assert!(run_dir.join("metrics.jsonl").exists());
    let epoch_ckpts = fs::read_dir(&run_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".symb")
        })
        .count();
    assert!(epoch_ckpts >= 1, "at least one epoch checkpoint should survive the abort");
}
