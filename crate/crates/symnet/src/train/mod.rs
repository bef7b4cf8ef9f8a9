//! Two-stage training: joint NLL over both views first, then the margin
//! regularizer added (or plain joint training for the ablation). Classic
//! single-network training runs the same machinery with the full step
//! budget in one stage. One global step counter drives the schedule; the
//! stage transition changes only the objective.

mod adam;
pub mod losses;
mod metrics;

pub use adam::{OptimizerState, StepReport};
pub use metrics::MetricsRecord;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batch_by_length, Batch, DataSplits};
use crate::error::{Error, Result};
use crate::model::{init_store, Binding, ForwardCtx, ModelDims, ModelView};
use crate::symbiosis::{build_symbiosis, SymbiosisModel, SymbiosisSpec};
use crate::tensor::{Precision, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Objective {
    Sym,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub alpha: f64,
    pub warmup_steps: u64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub batch_token_budget: usize,
    pub label_eps: f64,
    pub seed: u64,
    pub stage2_objective: Stage2Objective,
    pub precision: Precision,
    pub keep_checkpoints: usize,
    pub patience: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.1,
            alpha: 1.0,
            warmup_steps: 400,
            lr_peak: 5e-4,
            lr_floor: 1e-7,
            stage1_steps: 5000,
            stage2_steps: 1000,
            batch_token_budget: 256,
            label_eps: 0.1,
            seed: 1,
            stage2_objective: Stage2Objective::Sym,
            precision: Precision::Single,
            keep_checkpoints: 8,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 0.0 {
            return Err(Error::Config(format!(
                "train.tau must be >= 0, got {}",
                self.tau
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "train.alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.label_eps) {
            return Err(Error::Config(format!(
                "train.label_eps must be in [0, 1), got {}",
                self.label_eps
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("train.warmup_steps must be >= 1".into()));
        }
        if self.lr_peak <= 0.0 || self.lr_floor <= 0.0 || self.lr_floor > self.lr_peak {
            return Err(Error::Config(format!(
                "learning rate endpoints invalid: floor {} peak {}",
                self.lr_floor, self.lr_peak
            )));
        }
        if self.batch_token_budget == 0 {
            return Err(Error::Config(
                "train.batch_token_budget must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_steps: self.warmup_steps,
            lr_floor: self.lr_floor,
            lr_peak: self.lr_peak,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }
}

/// Linear warmup from `lr_floor` to `lr_peak`, then inverse square root
/// decay; continuous at the warmup boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub lr_floor: f64,
    pub lr_peak: f64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            self.lr_floor + (self.lr_peak - self.lr_floor) * step as f64 / self.warmup_steps as f64
        } else {
            self.lr_peak * (self.warmup_steps as f64 / step as f64).sqrt()
        }
    }
}

// ── Training ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum ModelSetup {
    Classic { enc_depth: usize, dec_depth: usize },
    Symbiosis(SymbiosisSpec),
}

pub enum TrainedModel {
    Classic(ModelView),
    Symbiosis(Box<SymbiosisModel>),
}

impl TrainedModel {
    /// The network to evaluate and return: the M-Net for symbiosis
    /// training, the single network otherwise.
    pub fn mnet(&self) -> &ModelView {
        match self {
            TrainedModel::Classic(v) => v,
            TrainedModel::Symbiosis(m) => &m.mnet,
        }
    }

    pub fn snet(&self) -> Option<&ModelView> {
        match self {
            TrainedModel::Classic(_) => None,
            TrainedModel::Symbiosis(m) => Some(&m.snet),
        }
    }
}

/// Held-out statistics (dropout off).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ValStats {
    pub nll_m: f64,
    pub nll_s: Option<f64>,
    pub margin_mean: Option<f64>,
    pub hinge_active_frac: Option<f64>,
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub final_checkpoint: Checkpoint,
    pub stage_boundary_checkpoint: Option<Checkpoint>,
    pub stage_boundary_val: Option<ValStats>,
    pub final_val: ValStats,
    pub steps_run: u64,
}

struct MetricsSink {
    records: Vec<MetricsRecord>,
    file: Option<std::io::BufWriter<fs::File>>,
}

impl MetricsSink {
    fn push(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{}", rec.to_json_line())?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Runs the full schedule (Algorithm: joint stage, then margin stage; a
/// classic setup spends the whole budget on its single NLL objective).
/// Checkpoints are written once per epoch plus a final one; a NaN loss or
/// gradient aborts with artifacts preserved.
pub fn run_training(
    dims: &ModelDims,
    setup: &ModelSetup,
    cfg: &TrainConfig,
    data: &DataSplits,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dims.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let prec = cfg.precision;
    let model = match setup {
        ModelSetup::Classic {
            enc_depth,
            dec_depth,
        } => {
            let store = init_store(dims, *enc_depth, *dec_depth, cfg.seed, prec).shared();
            TrainedModel::Classic(ModelView::standalone(
                dims.clone(),
                *enc_depth,
                *dec_depth,
                store,
            ))
        }
        ModelSetup::Symbiosis(spec) => {
            TrainedModel::Symbiosis(Box::new(build_symbiosis(dims, spec, cfg.seed, prec)?))
        }
    };
    let store = model.mnet().store.clone();

    let batches = batch_by_length(&data.train, cfg.batch_token_budget)?;
    let valid_batches = if data.valid.is_empty() {
        Vec::new()
    } else {
        batch_by_length(&data.valid, cfg.batch_token_budget)?
    };

    let mut run_rng =
        ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(
        cfg.seed.wrapping_mul(0xBF58_476D_1CE4_E5B9).wrapping_add(2),
    ));

    let mut sink = MetricsSink {
        records: Vec::new(),
        file: match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(std::io::BufWriter::new(fs::File::create(
                    dir.join("metrics.jsonl"),
                )?))
            }
            None => None,
        },
    };

    let mut opt = OptimizerState::default();
    let schedule = cfg.schedule();
    let total = cfg.total_steps();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    order.shuffle(&mut run_rng);
    let mut cursor = 0usize;

    let mut checkpoint_paths: Vec<PathBuf> = Vec::new();
    let mut epoch_ckpts: Vec<PathBuf> = Vec::new();
    let mut stage_boundary_checkpoint = None;
    let mut stage_boundary_val = None;
    let mut best_val = f64::INFINITY;
    let mut epochs_since_improve: u32 = 0;
    let mut step: u64 = 0;
    let mut force_stage_end = false;

    while step < total {
        if force_stage_end {
            force_stage_end = false;
            if step < cfg.stage1_steps {
                // plateau in stage 1: move straight to the margin stage
                step = cfg.stage1_steps;
                if step >= total {
                    break;
                }
                stage_boundary_checkpoint = Some(Checkpoint::from_store(dims, &store.borrow()));
                stage_boundary_val = Some(eval_stats(
                    &model,
                    &valid_batches.iter().collect::<Vec<_>>(),
                    cfg,
                    prec,
                ));
                best_val = f64::INFINITY;
                epochs_since_improve = 0;
            } else {
                break;
            }
        }
        step += 1;
        let stage: u8 = if step <= cfg.stage1_steps { 1 } else { 2 };
        let batch = &batches[order[cursor]];
        cursor += 1;

        let tape = Tape::new(prec);
        let binding = Binding::new(&tape, store.clone(), true);
        let ctx = ForwardCtx {
            tape: &tape,
            binding: &binding,
            train: true,
            rng: Some(&dropout_rng),
        };

        let parts = match (&model, stage) {
            (TrainedModel::Classic(view), _) => {
                let loss = losses::nll_loss(&ctx, view, batch, cfg.label_eps);
                losses::StepLoss {
                    loss,
                    nll_m: tape.scalar(loss),
                    nll_s: None,
                    margin_mean: None,
                    hinge_active_frac: None,
                }
            }
            (TrainedModel::Symbiosis(m), 1) => losses::joint_loss(&ctx, m, batch, cfg.label_eps),
            (TrainedModel::Symbiosis(m), _) => match cfg.stage2_objective {
                Stage2Objective::Joint => losses::joint_loss(&ctx, m, batch, cfg.label_eps),
                Stage2Objective::Sym => {
                    losses::sym_loss(&ctx, m, batch, cfg.tau, cfg.alpha, cfg.label_eps)
                }
            },
        };
        let loss_value = tape.scalar(parts.loss);
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss_value}"),
            });
        }
        tape.backward(parts.loss);
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, leaf) in binding.bound() {
            if let Some(g) = tape.grad(leaf) {
                grads.insert(name, g.data().to_vec());
            }
        }
        let lr = schedule.lr_at(step);
        opt.step(&mut store.borrow_mut(), &grads, lr, prec, step)?;

        sink.push(MetricsRecord {
            step,
            stage,
            lr,
            nll_m: parts.nll_m,
            nll_s: parts.nll_s,
            margin_mean: parts.margin_mean,
            hinge_active_frac: parts.hinge_active_frac,
            loss: loss_value,
        })?;

        // stage boundary: capture state bit-exactly before the objective changes
        if step == cfg.stage1_steps && cfg.stage2_steps > 0 {
            stage_boundary_checkpoint = Some(Checkpoint::from_store(dims, &store.borrow()));
            stage_boundary_val = Some(eval_stats(
                &model,
                &valid_batches.iter().collect::<Vec<_>>(),
                cfg,
                prec,
            ));
            best_val = f64::INFINITY;
            epochs_since_improve = 0;
        }

        if cursor == order.len() {
            // epoch boundary: checkpoint, reshuffle, optional early stop
            cursor = 0;
            order.shuffle(&mut run_rng);
            if let Some(dir) = out_dir {
                let path = dir.join(format!("ckpt-{step:07}.symb"));
                Checkpoint::from_store(dims, &store.borrow()).write(&path)?;
                epoch_ckpts.push(path.clone());
                checkpoint_paths.push(path);
                while epoch_ckpts.len() > cfg.keep_checkpoints.max(1) {
                    let old = epoch_ckpts.remove(0);
                    let _ = fs::remove_file(&old);
                    checkpoint_paths.retain(|p| p != &old);
                }
            }
            if let (Some(patience), false) = (cfg.patience, valid_batches.is_empty()) {
                let stats =
                    eval_stats(&model, &valid_batches.iter().collect::<Vec<_>>(), cfg, prec);
                if stats.nll_m < best_val - 1e-4 {
                    best_val = stats.nll_m;
                    epochs_since_improve = 0;
                } else {
                    epochs_since_improve += 1;
                    if epochs_since_improve > patience {
                        force_stage_end = true;
                    }
                }
            }
        }
    }

    let final_checkpoint = Checkpoint::from_store(dims, &store.borrow());
    if let Some(dir) = out_dir {
        let path = dir.join("ckpt-final.symb");
        final_checkpoint.write(&path)?;
        fs::write(dir.join("ckpt-final.opt"), opt.to_sidecar_bytes())?;
        checkpoint_paths.push(path);
        if let Some(f) = sink.file.as_mut() {
            f.flush()?;
        }
    }
    let final_val = eval_stats(&model, &valid_batches.iter().collect::<Vec<_>>(), cfg, prec);
    Ok(TrainOutcome {
        model,
        metrics: sink.records,
        checkpoint_paths,
        final_checkpoint,
        stage_boundary_checkpoint,
        stage_boundary_val,
        final_val,
        steps_run: step,
    })
}

/// Entry point mirroring the two-stage procedure: stage 1 optimizes the
/// joint NLL, stage 2 the configured objective, and the M-Net is what
/// comes back to the caller.
pub fn sym_train(
    dims: &ModelDims,
    spec: &SymbiosisSpec,
    cfg: &TrainConfig,
    data: &DataSplits,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    run_training(dims, &ModelSetup::Symbiosis(*spec), cfg, data, out_dir)
}

/// Held-out statistics with dropout off: token-mean smoothed NLL per
/// view, and margin statistics when two views exist.
pub fn eval_stats(
    model: &TrainedModel,
    batches: &[&Batch],
    cfg: &TrainConfig,
    prec: Precision,
) -> ValStats {
    if batches.is_empty() {
        return ValStats {
            nll_m: f64::NAN,
            nll_s: None,
            margin_mean: None,
            hinge_active_frac: None,
        };
    }
    let mut nll_m_sum = 0.0;
    let mut nll_s_sum = 0.0;
    let mut tokens = 0usize;
    let mut margins_m: Vec<f64> = Vec::new();
    let mut margins_s: Vec<f64> = Vec::new();
    for batch in batches {
        let tape = Tape::new(prec);
        let store = model.mnet().store.clone();
        let binding = Binding::new(&tape, store, false);
        let ctx = ForwardCtx::eval(&tape, &binding);
        let n = batch.nonpad_target_tokens();
        tokens += n;
        match model {
            TrainedModel::Classic(view) => {
                let ce = losses::nll_loss(&ctx, view, batch, cfg.label_eps);
                nll_m_sum += tape.scalar(ce) * n as f64;
            }
            TrainedModel::Symbiosis(m) => {
                let logits_m = crate::model::batch_logits(&m.mnet, &ctx, batch);
                let logits_s = crate::model::batch_logits(&m.snet, &ctx, batch);
                let targets: Vec<usize> = batch.tgt_out.iter().map(|&t| t as usize).collect();
                let ce_m = tape.label_smoothed_ce(
                    logits_m,
                    &targets,
                    cfg.label_eps,
                    crate::data::PAD as usize,
                );
                let ce_s = tape.label_smoothed_ce(
                    logits_s,
                    &targets,
                    cfg.label_eps,
                    crate::data::PAD as usize,
                );
                nll_m_sum += tape.scalar(ce_m) * n as f64;
                nll_s_sum += tape.scalar(ce_s) * n as f64;
                let lp_m = crate::model::sentence_log_probs(&tape, logits_m, batch);
                let lp_s = crate::model::sentence_log_probs(&tape, logits_s, batch);
                margins_m.extend_from_slice(tape.value(lp_m).data());
                margins_s.extend_from_slice(tape.value(lp_s).data());
            }
        }
    }
    match model {
        TrainedModel::Classic(_) => ValStats {
            nll_m: nll_m_sum / tokens as f64,
            nll_s: None,
            margin_mean: None,
            hinge_active_frac: None,
        },
        TrainedModel::Symbiosis(_) => {
            let (_, margin_mean, active) = losses::hinge_batch(&margins_m, &margins_s, cfg.tau);
            ValStats {
                nll_m: nll_m_sum / tokens as f64,
                nll_s: Some(nll_s_sum / tokens as f64),
                margin_mean: Some(margin_mean),
                hinge_active_frac: Some(active),
            }
        }
    }
}

/// Elementwise arithmetic mean of parameter sets with identical schemas.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    if ckpts.is_empty() {
        return Err(Error::Checkpoint("cannot average zero checkpoints".into()));
    }
    let first = &ckpts[0];
    for other in &ckpts[1..] {
        if let Some(diff) = first.schema_diff(other) {
            return Err(Error::Checkpoint(format!(
                "checkpoint schemas differ: {diff}"
            )));
        }
    }
    let k = ckpts.len() as f64;
    let mut out = first.clone();
    for (ri, rec) in out.records.iter_mut().enumerate() {
        for (vi, slot) in rec.data.iter_mut().enumerate() {
            let sum: f64 = ckpts.iter().map(|c| c.records[ri].data[vi] as f64).sum();
            *slot = (sum / k) as f32;
        }
    }
    Ok(out)
}
