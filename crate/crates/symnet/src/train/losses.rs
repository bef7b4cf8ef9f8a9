//! Training objectives. The per-view negative log-likelihood surrogate is
//! label-smoothed cross-entropy; the margin regularizer hinges on the
//! unsmoothed per-sentence sequence log-likelihood gap between the M-Net
//! and the S-Net, applied per sentence and averaged over the batch.

use crate::data::Batch;
use crate::model::{batch_logits, sentence_log_probs, ForwardCtx, ModelView};
use crate::symbiosis::SymbiosisModel;
use crate::tensor::{Tape, TensorRef};

/// Scalar training loss plus the step statistics the metrics stream wants.
pub struct StepLoss {
    pub loss: TensorRef,
    pub nll_m: f64,
    pub nll_s: Option<f64>,
    pub margin_mean: Option<f64>,
    pub hinge_active_frac: Option<f64>,
}

/// Closed-form hinge over per-sentence log-likelihood pairs:
/// `mean_i max{0, tau - (logp_m[i] - logp_s[i])}`. Returns the mean hinge,
/// the mean margin, and the fraction of sentences with an active hinge.
pub fn hinge_batch(logp_m: &[f64], logp_s: &[f64], tau: f64) -> (f64, f64, f64) {
    assert_eq!(
        logp_m.len(),
        logp_s.len(),
        "margin needs paired sentence scores"
    );
    assert!(!logp_m.is_empty(), "margin over an empty batch");
    let n = logp_m.len() as f64;
    let mut hinge_sum = 0.0;
    let mut margin_sum = 0.0;
    let mut active = 0usize;
    for (&m, &s) in logp_m.iter().zip(logp_s.iter()) {
        let margin = m - s;
        margin_sum += margin;
        let h = (tau - margin).max(0.0);
        hinge_sum += h;
        if margin < tau {
            active += 1;
        }
    }
    (hinge_sum / n, margin_sum / n, active as f64 / n)
}

/// Label-smoothed cross-entropy of one view, averaged over non-pad target
/// tokens (the training surrogate for the negative log-likelihood).
pub fn nll_loss(ctx: &ForwardCtx, view: &ModelView, batch: &Batch, label_eps: f64) -> TensorRef {
    assert!(batch.batch > 0, "nll_loss on an empty batch");
    let logits = batch_logits(view, ctx, batch);
    ce_from_logits(ctx.tape, logits, batch, label_eps)
}

fn ce_from_logits(tape: &Tape, logits: TensorRef, batch: &Batch, label_eps: f64) -> TensorRef {
    let targets: Vec<usize> = batch.tgt_out.iter().map(|&t| t as usize).collect();
    tape.label_smoothed_ce(logits, &targets, label_eps, crate::data::PAD as usize)
}

/// One forward per view, reused by both the smoothed CE and the
/// unsmoothed sentence log-probabilities.
fn view_outputs(
    ctx: &ForwardCtx,
    view: &ModelView,
    batch: &Batch,
    label_eps: f64,
) -> (TensorRef, TensorRef) {
    let logits = batch_logits(view, ctx, batch);
    let ce = ce_from_logits(ctx.tape, logits, batch, label_eps);
    let logp = sentence_log_probs(ctx.tape, logits, batch);
    (ce, logp)
}

/// Mean of the two views' NLL surrogates: `(nll_m + nll_s) / 2`.
pub fn joint_loss(
    ctx: &ForwardCtx,
    model: &SymbiosisModel,
    batch: &Batch,
    label_eps: f64,
) -> StepLoss {
    let t = ctx.tape;
    let ce_m = nll_loss(ctx, &model.mnet, batch, label_eps);
    let ce_s = nll_loss(ctx, &model.snet, batch, label_eps);
    let joint = t.scale(t.add(ce_m, ce_s), 0.5);
    StepLoss {
        loss: joint,
        nll_m: t.scalar(ce_m),
        nll_s: Some(t.scalar(ce_s)),
        margin_mean: None,
        hinge_active_frac: None,
    }
}

/// Mean per-sentence hinge `max{0, tau - (log P_M - log P_S)}` on the
/// unsmoothed sequence log-likelihoods.
pub fn margin_loss(
    ctx: &ForwardCtx,
    model: &SymbiosisModel,
    batch: &Batch,
    tau: f64,
) -> (TensorRef, f64, f64) {
    let t = ctx.tape;
    let logits_m = batch_logits(&model.mnet, ctx, batch);
    let logits_s = batch_logits(&model.snet, ctx, batch);
    let lp_m = sentence_log_probs(t, logits_m, batch);
    let lp_s = sentence_log_probs(t, logits_s, batch);
    margin_from_log_probs(t, lp_m, lp_s, tau)
}

fn margin_from_log_probs(
    tape: &Tape,
    lp_m: TensorRef,
    lp_s: TensorRef,
    tau: f64,
) -> (TensorRef, f64, f64) {
    assert!(
        tau >= 0.0,
        "margin threshold tau must be non-negative, got {tau}"
    );
    let diff = tape.sub(lp_m, lp_s);
    let tau_c = tape.scalar_const(tau);
    let hinge = tape.relu(tape.sub(tau_c, diff));
    let mean = tape.reduce_mean(hinge, Some(0));
    let (_, margin_mean, active_frac) =
        hinge_batch(tape.value(lp_m).data(), tape.value(lp_s).data(), tau);
    (mean, margin_mean, active_frac)
}

/// Full stage-2 objective: `joint + alpha * margin`, with one forward per
/// view shared between the two terms.
pub fn sym_loss(
    ctx: &ForwardCtx,
    model: &SymbiosisModel,
    batch: &Batch,
    tau: f64,
    alpha: f64,
    label_eps: f64,
) -> StepLoss {
    assert!(
        alpha >= 0.0,
        "margin weight alpha must be non-negative, got {alpha}"
    );
    let t = ctx.tape;
    let (ce_m, lp_m) = view_outputs(ctx, &model.mnet, batch, label_eps);
    let (ce_s, lp_s) = view_outputs(ctx, &model.snet, batch, label_eps);
    let joint = t.scale(t.add(ce_m, ce_s), 0.5);
    let (hinge_mean, margin_mean, active_frac) = margin_from_log_probs(t, lp_m, lp_s, tau);
    let loss = t.add(joint, t.scale(hinge_mean, alpha));
    StepLoss {
        loss,
        nll_m: t.scalar(ce_m),
        nll_s: Some(t.scalar(ce_s)),
        margin_mean: Some(margin_mean),
        hinge_active_frac: Some(active_frac),
    }
}
