//! Beam-search and greedy decoding with the `((5+T)/6)^alpha` length
//! penalty, corpus-level unsmoothed BLEU-4, and teacher-forced token
//! accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, SentencePair, Vocab, BOS, EOS, PAD, RESERVED};
use crate::error::{Error, Result};
use crate::model::{batch_logits, decode_logits, encode, Binding, ForwardCtx, ModelView};
use crate::tensor::kernels::logsumexp_row;
use crate::tensor::{Precision, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub length_penalty_exp: f64,
    pub max_decode_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            length_penalty_exp: 0.6,
            max_decode_len: 32,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam.beam_size must be >= 1".into()));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Config("beam.max_decode_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// `((5 + t) / 6)^alpha`; hypotheses are ranked by `log_prob / lp(T)`
/// where `T` counts generated tokens including the terminal EOS.
pub fn length_penalty(t: usize, alpha: f64) -> f64 {
    ((5.0 + t as f64) / 6.0).powf(alpha)
}

/// Candidate target sequence. `tokens` are the generated ids (terminal
/// EOS included once finished); the decoder input is BOS followed by them.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len().max(1), alpha)
    }
}

/// Deterministic ordering: higher score first, then ascending token
/// sequence (which puts lower token ids and shorter prefixes first).
fn better(a_score: f64, a_tokens: &[u32], b_score: f64, b_tokens: &[u32]) -> std::cmp::Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Standard beam search over the full vocabulary. Finished hypotheses are
/// collected out of the beam and ranked by length-penalized score; if
/// nothing finishes within `max_decode_len`, the best unfinished
/// hypothesis is returned.
pub fn beam_search(view: &ModelView, src: &[u32], cfg: &BeamConfig, prec: Precision) -> Hypothesis {
    let v = view.dims.vocab_size;
    let alpha = cfg.length_penalty_exp;
    let tape = Tape::new(prec);
    let binding = Binding::new(&tape, view.store.clone(), false);
    let ctx = ForwardCtx::eval(&tape, &binding);
    let (enc_out, src_mask) = encode(view, &ctx, src, 1, src.len());

    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_decode_len {
        if live.is_empty() {
            break;
        }
        let t = live[0].tokens.len() + 1;
        let mut tgt_in = Vec::with_capacity(live.len() * t);
        for h in &live {
            tgt_in.push(BOS);
            tgt_in.extend_from_slice(&h.tokens);
        }
        let logits = decode_logits(view, &ctx, enc_out, src_mask, &tgt_in, live.len(), t);
        let vals = tape.value(logits);

        let mut candidates: Vec<Hypothesis> = Vec::with_capacity(live.len() * v);
        for (i, h) in live.iter().enumerate() {
            let row = &vals.data()[(i * t + t - 1) * v..(i * t + t) * v];
            let lse = logsumexp_row(row);
            for (tok, &logit) in row.iter().enumerate() {
                let cum = h.log_prob + (logit - lse);
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: cum,
                    finished: tok as u32 == EOS,
                });
            }
        }
        // every candidate competes for a beam slot on cumulative log-prob;
        // selected candidates that produced EOS retire into the pool
        candidates.sort_by(|a, b| better(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
        candidates.truncate(cfg.beam_size);
        live = Vec::with_capacity(candidates.len());
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }

    // `better` sorts best-first, so the best element is the minimum
    let pick = |pool: &[Hypothesis]| -> Option<Hypothesis> {
        pool.iter()
            .min_by(|a, b| better(a.score(alpha), &a.tokens, b.score(alpha), &b.tokens))
            .cloned()
    };
    pick(&finished)
        .or_else(|| pick(&live))
        .unwrap_or(Hypothesis {
            tokens: vec![EOS],
            log_prob: f64::NEG_INFINITY,
            finished: false,
        })
}

/// Greedy argmax decoding (independent of the beam machinery).
pub fn greedy_decode(view: &ModelView, src: &[u32], max_len: usize, prec: Precision) -> Vec<u32> {
    let v = view.dims.vocab_size;
    let tape = Tape::new(prec);
    let binding = Binding::new(&tape, view.store.clone(), false);
    let ctx = ForwardCtx::eval(&tape, &binding);
    let (enc_out, src_mask) = encode(view, &ctx, src, 1, src.len());
    let mut tokens: Vec<u32> = Vec::new();
    for _ in 0..max_len {
        let mut tgt_in = vec![BOS];
        tgt_in.extend_from_slice(&tokens);
        let t = tgt_in.len();
        let logits = decode_logits(view, &ctx, enc_out, src_mask, &tgt_in, 1, t);
        let vals = tape.value(logits);
        let row = &vals.data()[(t - 1) * v..t * v];
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        tokens.push(best as u32);
        if best as u32 == EOS {
            break;
        }
    }
    tokens
}

// ── BLEU ───────────────────────────────────────────────────────────────

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level unsmoothed BLEU-4 in [0, 100]: geometric mean of the
/// modified n-gram precisions (n = 1..4) times the brevity penalty; zero
/// if any precision is zero.
pub fn bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Eval(format!(
            "hypothesis/reference counts differ: {} vs {}",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Eval("empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references.iter()) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(rf, n);
            for (gram, &count) in &h {
                total[n - 1] += count;
                matched[n - 1] += count.min(r.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p_sum = 0.0;
    for n in 0..4 {
        if total[n] == 0 || matched[n] == 0 {
            return Ok(0.0);
        }
        log_p_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_p_sum / 4.0).exp())
}

// ── Token accuracy ─────────────────────────────────────────────────────

/// Teacher-forced argmax accuracy over non-pad target positions.
pub fn token_accuracy(view: &ModelView, batch: &Batch, prec: Precision) -> f64 {
    let tape = Tape::new(prec);
    let binding = Binding::new(&tape, view.store.clone(), false);
    let ctx = ForwardCtx::eval(&tape, &binding);
    let logits = batch_logits(view, &ctx, batch);
    let vals = tape.value(logits);
    let v = view.dims.vocab_size;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (pos, &target) in batch.tgt_out.iter().enumerate() {
        if target == PAD {
            continue;
        }
        total += 1;
        let row = &vals.data()[pos * v..(pos + 1) * v];
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        if best as u32 == target {
            correct += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}

// ── Evaluation report ──────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub token_acc: f64,
    pub n_sentences: usize,
    pub beam: usize,
    pub lp: f64,
}

/// Beam-decodes every pair, scores corpus BLEU over payload tokens, and
/// measures teacher-forced accuracy. Optionally writes one detokenized
/// sentence per line through `lines_out`.
pub fn evaluate(
    view: &ModelView,
    pairs: &[SentencePair],
    vocab: &Vocab,
    cfg: &BeamConfig,
    prec: Precision,
    mut lines_out: Option<&mut dyn std::io::Write>,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Eval("no sentences to evaluate".into()));
    }
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let hyp = beam_search(view, &pair.src, cfg, prec);
        let payload: Vec<u32> = hyp
            .tokens
            .iter()
            .copied()
            .filter(|&t| t >= RESERVED)
            .collect();
        if let Some(w) = lines_out.as_deref_mut() {
            writeln!(w, "{}", vocab.detokenize(&payload)).map_err(Error::Io)?;
        }
        hyps.push(payload);
        refs.push(
            pair.tgt
                .iter()
                .copied()
                .filter(|&t| t >= RESERVED)
                .collect(),
        );
    }
    let bleu_score = bleu(&hyps, &refs)?;
    let batches = crate::data::batch_by_length(pairs, 512.max(cfg.max_decode_len + 1))?;
    let mut correct_weighted = 0.0;
    let mut tokens = 0usize;
    for b in &batches {
        let n = b.nonpad_target_tokens();
        correct_weighted += token_accuracy(view, b, prec) * n as f64;
        tokens += n;
    }
    Ok(EvalReport {
        bleu: bleu_score,
        token_acc: correct_weighted / tokens as f64,
        n_sentences: pairs.len(),
        beam: cfg.beam_size,
        lp: cfg.length_penalty_exp,
    })
}
