//! Run harness behind the CLI verbs: training runs with manifests and
//! artifacts, checkpoint evaluation, the classic-vs-symbiosis depth
//! sweep, the gradient verification suite, and sharing verification.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, Batch, DataSplits, SentencePair, EOS};
use crate::decode::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::model::{init_store, Binding, ForwardCtx, ModelDims, ModelView, NormStyle};
use crate::symbiosis::{build_symbiosis, verify_sharing, SharingReport, SymbiosisSpec};
use crate::tensor::gradcheck::{grad_check, rel_err, GradCheckReport};
use crate::tensor::{Precision, Tape, Tensor};
use crate::train::{
    average_checkpoints, losses, run_training, MetricsRecord, TrainOutcome, ValStats,
};

/// Environment variable overriding `[output].dir`.
pub const OUT_DIR_ENV: &str = "SYMNET_OUT_DIR";

fn code_version() -> String {
    match option_env!("GIT_SHA") {
        Some(sha) => format!("{}+{}", env!("CARGO_PKG_VERSION"), sha),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub layer_map: Option<Vec<usize>>,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub wall_clock_secs: Option<f64>,
    pub steps_run: Option<u64>,
    pub final_metrics: Option<MetricsRecord>,
    pub final_val: Option<ValStats>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub seed_override: Option<u64>,
    pub dry_run: bool,
}

pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub outcome: Option<TrainOutcome>,
    pub layer_map: Option<Vec<usize>>,
    pub data: Option<DataSplits>,
}

fn resolved_out_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.output.dir),
    }
}

/// Trains per config (two-stage symbiosis, or classic with the merged
/// budget) and writes the run directory: manifest, config copy, metrics
/// stream, checkpoints. A dry run only validates and reports the layer map.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed_override {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    let layer_map = match cfg.symbiosis_spec() {
        Some(spec) => Some(crate::symbiosis::build_layer_map(spec.strategy, spec.m, spec.o)?.0),
        None => None,
    };
    let out_dir = resolved_out_dir(&cfg);
    if opts.dry_run {
        return Ok(TrainArtifacts {
            out_dir,
            outcome: None,
            layer_map,
            data: None,
        });
    }
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
    let mut manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.train.seed,
        layer_map: layer_map.clone(),
        code_version: code_version(),
        started_unix: unix_now(),
        finished_unix: None,
        wall_clock_secs: None,
        steps_run: None,
        final_metrics: None,
        final_val: None,
    };
    write_manifest(&out_dir, &manifest)?;

    let started = Instant::now();
    let data = generate(&cfg.data)?;
    let outcome = run_training(
        &cfg.dims(),
        &cfg.setup(),
        &cfg.effective_train(),
        &data,
        Some(&out_dir),
    )?;

    manifest.finished_unix = Some(unix_now());
    manifest.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    manifest.steps_run = Some(outcome.steps_run);
    manifest.final_metrics = outcome.metrics.last().cloned();
    manifest.final_val = Some(outcome.final_val);
    write_manifest(&out_dir, &manifest)?;
    Ok(TrainArtifacts {
        out_dir,
        outcome: Some(outcome),
        layer_map,
        data: Some(data),
    })
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

// ── eval ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub avg_last: usize,
    pub subnet: bool,
    pub decoded_out: Option<PathBuf>,
}

/// Loads a checkpoint (optionally averaging the last `avg_last` epoch
/// checkpoints in its directory), rebuilds the configured model around
/// it, and reports BLEU plus token accuracy on the held-out test split.
/// `--subnet` evaluates the S-Net view instead of the M-Net.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    cfg.validate()?;
    let ck = load_averaged(checkpoint, opts.avg_last.max(1))?;
    let dims = cfg.dims();
    check_dims(&ck.dims, &dims)?;
    let prec = cfg.train.precision;
    let view = match cfg.symbiosis_spec() {
        Some(spec) => {
            let model = build_symbiosis(&dims, &spec, cfg.train.seed, prec)?;
            ck.load_into(&mut model.store().borrow_mut())?;
            if opts.subnet {
                model.snet.clone()
            } else {
                model.mnet.clone()
            }
        }
        None => {
            if opts.subnet {
                return Err(Error::Eval(
                    "--subnet needs a symbiosis config (no sub network in classic mode)".into(),
                ));
            }
            let store = init_store(
                &dims,
                cfg.symbiosis.m,
                cfg.symbiosis.d,
                cfg.train.seed,
                prec,
            )
            .shared();
            ck.load_into(&mut store.borrow_mut())?;
            ModelView::standalone(dims, cfg.symbiosis.m, cfg.symbiosis.d, store)
        }
    };
    let data = generate(&cfg.data)?;
    let mut file;
    let sink: Option<&mut dyn std::io::Write> = match &opts.decoded_out {
        Some(path) => {
            file = std::io::BufWriter::new(fs::File::create(path)?);
            Some(&mut file)
        }
        None => None,
    };
    evaluate(&view, &data.test, &data.vocab, &cfg.beam, prec, sink)
}

fn check_dims(ck: &ModelDims, cfg: &ModelDims) -> Result<()> {
    let structural = |d: &ModelDims| {
        (
            d.d_model,
            d.n_heads,
            d.d_ffn,
            d.vocab_size,
            d.max_len,
            d.norm_style == NormStyle::Post,
        )
    };
    if structural(ck) != structural(cfg) {
        return Err(Error::Checkpoint(format!(
            "checkpoint dims {ck:?} do not match config dims {cfg:?}"
        )));
    }
    Ok(())
}

/// The checkpoint itself for `k == 1`; otherwise the elementwise mean of
/// the last `k` epoch checkpoints living next to it.
fn load_averaged(path: &Path, k: usize) -> Result<Checkpoint> {
    if k <= 1 {
        return Checkpoint::read(path);
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut epochs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("ckpt-") && n.ends_with(".symb") && n != "ckpt-final.symb")
                .unwrap_or(false)
        })
        .collect();
    epochs.sort();
    if epochs.is_empty() {
        return Checkpoint::read(path);
    }
    let take = epochs.split_off(epochs.len().saturating_sub(k));
    let cks: Result<Vec<Checkpoint>> = take.iter().map(|p| Checkpoint::read(p)).collect();
    average_checkpoints(&cks?)
}

// ── compare ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareCell {
    pub m: usize,
    pub o: usize,
    pub seed: u64,
    pub mode: String,
    pub bleu: Option<f64>,
    pub token_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub m: usize,
    pub o: usize,
    pub classic_bleu: Option<f64>,
    pub symbiosis_bleu: Option<f64>,
    pub delta: Option<f64>,
    pub seeds: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
    pub cells: Vec<CompareCell>,
}

impl CompareTable {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.failures > 0)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>4} {:>4} | {:>13} {:>15} {:>8}\n",
            "m", "o", "classic BLEU", "symbiosis BLEU", "delta"
        ));
        out.push_str(&"-".repeat(52));
        out.push('\n');
        for r in &self.rows {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.2}"),
                None => "FAILED".to_string(),
            };
            out.push_str(&format!(
                "{:>4} {:>4} | {:>13} {:>15} {:>8}\n",
                r.m,
                r.o,
                fmt(r.classic_bleu),
                fmt(r.symbiosis_bleu),
                fmt(r.delta)
            ));
        }
        out
    }
}

/// Depth sweep: per (m, o) and per seed, trains a classic network and a
/// symbiosis pair under matched total step budgets, evaluates both on the
/// test split, and reports per-depth means plus a delta column. Sub-run
/// failures leave markers instead of aborting the sweep.
pub fn cmd_compare(cfg: &RunConfig) -> Result<CompareTable> {
    cfg.validate()?;
    let sweep = cfg
        .compare
        .clone()
        .ok_or_else(|| Error::Config("compare needs a [compare] section".into()))?;
    let out_root = resolved_out_dir(cfg).join("compare");
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &(m, o) in &sweep.depths {
        let mut classic_scores = Vec::new();
        let mut sym_scores = Vec::new();
        let mut failures = 0usize;
        for &seed in &sweep.seeds {
            for mode in ["classic", "symbiosis"] {
                let mut sub = cfg.clone();
                sub.compare = None;
                sub.symbiosis.m = m;
                sub.symbiosis.o = o;
                sub.symbiosis.enabled = mode == "symbiosis";
                sub.train.seed = seed;
                sub.data.seed = seed;
                sub.output.dir = out_root
                    .join(format!("m{m}-o{o}/{mode}/seed{seed}"))
                    .display()
                    .to_string();
                let result = run_and_eval(&sub);
                match result {
                    Ok(report) => {
                        if mode == "classic" {
                            classic_scores.push(report.bleu);
                        } else {
                            sym_scores.push(report.bleu);
                        }
                        cells.push(CompareCell {
                            m,
                            o,
                            seed,
                            mode: mode.to_string(),
                            bleu: Some(report.bleu),
                            token_acc: Some(report.token_acc),
                            error: None,
                        });
                    }
                    Err(e) => {
                        failures += 1;
                        cells.push(CompareCell {
                            m,
                            o,
                            seed,
                            mode: mode.to_string(),
                            bleu: None,
                            token_acc: None,
                            error: Some(e.to_string()),
                        });
                    }
                }
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let (cb, sb) = (mean(&classic_scores), mean(&sym_scores));
        rows.push(CompareRow {
            m,
            o,
            classic_bleu: cb,
            symbiosis_bleu: sb,
            delta: match (cb, sb) {
                (Some(c), Some(s)) => Some(s - c),
                _ => None,
            },
            seeds: sweep.seeds.len(),
            failures,
        });
    }
    let table = CompareTable { rows, cells };
    fs::create_dir_all(&out_root)?;
    fs::write(out_root.join("table.txt"), table.render())?;
    let mut jsonl = String::new();
    for cell in &table.cells {
        jsonl.push_str(&serde_json::to_string(cell).expect("cell serializes"));
        jsonl.push('\n');
    }
    fs::write(out_root.join("compare.jsonl"), jsonl)?;
    Ok(table)
}

fn run_and_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let out_dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
    let data = generate(&cfg.data)?;
    let outcome = run_training(
        &cfg.dims(),
        &cfg.setup(),
        &cfg.effective_train(),
        &data,
        Some(&out_dir),
    )?;
    evaluate(
        outcome.model.mnet(),
        &data.test,
        &data.vocab,
        &cfg.beam,
        cfg.train.precision,
        None,
    )
}

// ── gradcheck ──────────────────────────────────────────────────────────

pub struct SuiteLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for SuiteLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max rel err {:.3e} (tol {:.0e})",
            if self.pass { "pass" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tol
        )
    }
}

fn line(name: &str, report: &GradCheckReport) -> SuiteLine {
    SuiteLine {
        name: name.into(),
        max_rel_err: report.max_rel_err,
        tol: report.tol,
        pass: report.pass,
    }
}

/// Finite-difference verification of every primitive (tolerance 1e-4) and
/// of the full two-view margin objective end to end (tolerance 1e-3),
/// dropout off, in 64-bit mode.
pub fn gradient_suite() -> Vec<SuiteLine> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
    let mut rand_t = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    };
    let h = 1e-5;
    let tol = 1e-4;
    let mut lines = Vec::new();

    let w = rand_t(&[3, 4]);
    lines.push(line(
        "matmul",
        &grad_check(
            {
                let w = w.clone();
                move |t, x| {
                    let wr = t.constant(&w);
                    let y = t.matmul(x, wr);
                    let sq = t.mul(y, y);
                    t.reduce_sum(sq, None)
                }
            },
            &rand_t(&[2, 3]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "add_broadcast",
        &grad_check(
            |t, x| {
                let b = t.constant(&Tensor::new(vec![4], vec![0.3, -0.1, 0.7, 0.2]));
                let y = t.add(x, b);
                let sq = t.mul(y, y);
                t.reduce_sum(sq, None)
            },
            &rand_t(&[3, 4]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "mul",
        &grad_check(
            {
                let w = rand_t(&[2, 5]);
                move |t, x| {
                    let wr = t.constant(&w);
                    t.reduce_sum(t.mul(x, wr), None)
                }
            },
            &rand_t(&[2, 5]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "scale",
        &grad_check(
            |t, x| {
                let y = t.scale(x, -2.5);
                t.reduce_sum(t.mul(y, y), None)
            },
            &rand_t(&[4]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "relu",
        &grad_check(
            |t, x| {
                let y = t.relu(x);
                t.reduce_sum(t.mul(y, y), None)
            },
            &Tensor::new(vec![6], vec![0.8, -0.7, 1.2, -1.4, 0.5, -0.3]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "softmax",
        &grad_check(
            {
                let w = rand_t(&[2, 5]);
                move |t, x| {
                    let s = t.softmax(x, 1);
                    let wr = t.constant(&w);
                    t.reduce_sum(t.mul(s, wr), None)
                }
            },
            &rand_t(&[2, 5]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "layer_norm",
        &grad_check(
            |t, x| {
                let g = t.constant(&Tensor::new(vec![4], vec![1.1, 0.9, 1.3, 0.7]));
                let b = t.constant(&Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.3]));
                let y = t.layer_norm(x, g, b, 1e-5);
                t.reduce_sum(t.mul(y, y), None)
            },
            &rand_t(&[3, 4]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "gather",
        &grad_check(
            |t, x| {
                let y = t.gather(x, &[1, 0, 2, 1], &[4]);
                t.reduce_sum(t.mul(y, y), None)
            },
            &rand_t(&[3, 2]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "concat_split",
        &grad_check(
            |t, x| {
                let parts = t.split(x, 1, &[2, 3]);
                let back = t.concat(&[parts[1], parts[0]], 1);
                t.reduce_sum(t.mul(back, back), None)
            },
            &rand_t(&[2, 5]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "reshape_transpose",
        &grad_check(
            |t, x| {
                let r = t.reshape(x, &[2, 3, 2]);
                let p = t.transpose(r, &[2, 0, 1]);
                t.reduce_sum(t.mul(p, p), None)
            },
            &rand_t(&[4, 3]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "reduce_sum_mean",
        &grad_check(
            |t, x| {
                let s = t.reduce_sum(x, Some(1));
                let m = t.reduce_mean(x, Some(0));
                let both = t.concat(&[t.reshape(s, &[3]), t.reshape(m, &[4])], 0);
                t.reduce_sum(t.mul(both, both), None)
            },
            &rand_t(&[3, 4]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "log_exp",
        &grad_check(
            |t, x| {
                let e = t.exp(x);
                let l = t.log(e);
                t.reduce_sum(t.mul(l, e), None)
            },
            &rand_t(&[5]),
            h,
            tol,
        ),
    ));
    lines.push(line(
        "label_smoothed_ce",
        &grad_check(
            |t, x| t.label_smoothed_ce(x, &[1, 3, 0, 2], 0.1, 0),
            &rand_t(&[4, 5]),
            h,
            tol,
        ),
    ));
    lines.push(line("sym_loss_end_to_end", &end_to_end_check()));
    lines
}

/// Central finite differences through the entire two-view L_sym objective
/// on toy dimensions, every parameter coordinate, 64-bit, dropout off.
fn end_to_end_check() -> GradCheckReport {
    let dims = ModelDims {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 11,
        max_len: 12,
        dropout_p: 0.0,
        norm_style: NormStyle::Pre,
    };
    let spec = SymbiosisSpec {
        m: 2,
        o: 1,
        d: 1,
        strategy: crate::symbiosis::LayerMapStrategy::Bottom,
    };
    let model = build_symbiosis(&dims, &spec, 99, Precision::Double).unwrap();
    let batch = Batch::from_pairs(&[
        SentencePair {
            src: vec![5, 6, 7],
            tgt: vec![7, 6, 5, EOS],
        },
        SentencePair {
            src: vec![4, 8],
            tgt: vec![8, 4, EOS],
        },
    ]);
    let (tau, alpha, eps) = (0.1, 1.0, 0.1);

    let loss_value = |model: &crate::symbiosis::SymbiosisModel| -> f64 {
        let tape = Tape::new(Precision::Double);
        let binding = Binding::new(&tape, model.store(), false);
        let ctx = ForwardCtx::eval(&tape, &binding);
        let parts = losses::sym_loss(&ctx, model, &batch, tau, alpha, eps);
        tape.scalar(parts.loss)
    };

    // analytic gradients for every parameter
    let tape = Tape::new(Precision::Double);
    let binding = Binding::new(&tape, model.store(), true);
    let ctx = ForwardCtx::eval(&tape, &binding);
    let parts = losses::sym_loss(&ctx, &model, &batch, tau, alpha, eps);
    tape.backward(parts.loss);
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, leaf) in binding.bound() {
        let g = tape
            .grad(leaf)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; model.store().borrow().get(&name).values.len()]);
        analytic.push((name, g));
    }

    let h = 1e-5;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol: 1e-3,
        pass: true,
    };
    let store = model.store();
    for (name, grads) in &analytic {
        for (i, &analytic_g) in grads.iter().enumerate() {
            let orig = store.borrow().get(name).values[i];
            store.borrow_mut().get_mut(name).values[i] = orig + h;
            let plus = loss_value(&model);
            store.borrow_mut().get_mut(name).values[i] = orig - h;
            let minus = loss_value(&model);
            store.borrow_mut().get_mut(name).values[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic_g, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_coord = i;
                report.analytic_at_worst = analytic_g;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.pass = report.max_rel_err < report.tol;
    report
}

// ── verify ─────────────────────────────────────────────────────────────

/// Rebuilds the configured symbiosis model around a checkpoint and runs
/// the storage-identity and update-visibility checks.
pub fn cmd_verify(cfg: &RunConfig, checkpoint: &Path) -> Result<SharingReport> {
    cfg.validate()?;
    let spec = cfg
        .symbiosis_spec()
        .ok_or_else(|| Error::Config("verify needs symbiosis.enabled = true".into()))?;
    let dims = cfg.dims();
    let ck = Checkpoint::read(checkpoint)?;
    check_dims(&ck.dims, &dims)?;
    let model = build_symbiosis(&dims, &spec, cfg.train.seed, cfg.train.precision)?;
    ck.load_into(&mut model.store().borrow_mut())?;
    Ok(verify_sharing(&model))
}

// ── shared helpers for tests and the CLI ───────────────────────────────

/// Greedy token accuracy of a view over held-out pairs.
pub fn greedy_accuracy(
    view: &ModelView,
    pairs: &[SentencePair],
    budget: usize,
    prec: Precision,
) -> Result<f64> {
    let batches = crate::data::batch_by_length(pairs, budget)?;
    let mut correct = 0.0;
    let mut total = 0usize;
    for b in &batches {
        let n = b.nonpad_target_tokens();
        correct += crate::decode::token_accuracy(view, b, prec) * n as f64;
        total += n;
    }
    Ok(correct / total as f64)
}
