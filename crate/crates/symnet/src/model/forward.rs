//! Forward passes for a [`ModelView`]: embedding with sinusoidal
//! positions, multi-head attention, pre/post-norm sublayer pipelines, the
//! encoder and decoder stacks, and teacher-forced sequence
//! log-probabilities.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, PAD};
use crate::tensor::{Tape, Tensor, TensorRef};

use super::{dec_layer_prefix, enc_layer_prefix, ModelView, NormStyle, SharedStore};

const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

/// Parameters bound as tape leaves, at most once per name per tape, so
/// that every view running on the same tape shares the same leaf (and
/// therefore accumulates gradients into it).
pub struct Binding<'t> {
    tape: &'t Tape,
    store: SharedStore,
    trainable: bool,
    leaves: RefCell<BTreeMap<String, TensorRef>>,
}

impl<'t> Binding<'t> {
    pub fn new(tape: &'t Tape, store: SharedStore, trainable: bool) -> Self {
        Binding {
            tape,
            store,
            trainable,
            leaves: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn get(&self, name: &str) -> TensorRef {
        if let Some(&r) = self.leaves.borrow().get(name) {
            return r;
        }
        let r = {
            let store = self.store.borrow();
            let p = store.get(name);
            self.tape.leaf(
                &Tensor::new(p.shape.clone(), p.values.clone()),
                self.trainable,
            )
        };
        self.leaves.borrow_mut().insert(name.to_string(), r);
        r
    }

    /// Leaves bound so far, by name.
    pub fn bound(&self) -> Vec<(String, TensorRef)> {
        self.leaves
            .borrow()
            .iter()
            .map(|(n, &r)| (n, r))
            .map(|(n, r)| (n.clone(), r))
            .collect()
    }
}

/// Everything a forward pass needs besides the view itself.
pub struct ForwardCtx<'a, 't> {
    pub tape: &'t Tape,
    pub binding: &'a Binding<'t>,
    pub train: bool,
    pub rng: Option<&'a RefCell<ChaCha8Rng>>,
}

impl<'a, 't> ForwardCtx<'a, 't> {
    pub fn eval(tape: &'t Tape, binding: &'a Binding<'t>) -> Self {
        ForwardCtx {
            tape,
            binding,
            train: false,
            rng: None,
        }
    }

    fn dropout(&self, x: TensorRef, p: f64) -> TensorRef {
        if !self.train || p == 0.0 {
            return x;
        }
        let rng = self
            .rng
            .expect("training forward with dropout needs an rng in the forward context");
        self.tape.dropout(x, p, &mut *rng.borrow_mut())
    }
}

// ── Positional encoding ────────────────────────────────────────────────

/// Sinusoidal position table, shape `[1, len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = rate.sin();
            data[pos * d + 2 * i + 1] = rate.cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + d - 1] = rate.sin();
        }
    }
    Tensor::new(vec![1, len, d], data)
}

// ── Attention ──────────────────────────────────────────────────────────

/// `softmax(Q K^T / sqrt(d_k)) V` with an optional additive mask applied
/// to the scores before the softmax (masked positions carry -1e9).
pub fn scaled_dot_product_attention(
    tape: &Tape,
    q: TensorRef,
    k: TensorRef,
    v: TensorRef,
    mask: Option<TensorRef>,
) -> TensorRef {
    attention_inner(tape, q, k, v, mask, None)
}

fn attention_inner(
    tape: &Tape,
    q: TensorRef,
    k: TensorRef,
    v: TensorRef,
    mask: Option<TensorRef>,
    weight_dropout: Option<(&ForwardCtx, f64)>,
) -> TensorRef {
    let qs = tape.shape(q);
    let ks = tape.shape(k);
    let dk = *qs.last().unwrap();
    assert_eq!(
        dk,
        *ks.last().unwrap(),
        "attention: query d_k {} disagrees with key d_k {} (Q {:?}, K {:?})",
        dk,
        ks.last().unwrap(),
        qs,
        ks
    );
    let rank = ks.len();
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 1, rank - 2);
    let kt = tape.transpose(k, &perm);
    let mut scores = tape.matmul(q, kt);
    scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    if let Some(m) = mask {
        scores = tape.add(scores, m);
    }
    let axis = tape.shape(scores).len() - 1;
    let mut weights = tape.softmax(scores, axis);
    if let Some((ctx, p)) = weight_dropout {
        weights = ctx.dropout(weights, p);
    }
    tape.matmul(weights, v)
}

/// Multi-head attention over `[B, Tq, d]` queries and `[Bk, Tk, d]`
/// keys/values (`Bk` may be 1 to broadcast one memory over a batch).
fn multi_head_attention(
    ctx: &ForwardCtx,
    view: &ModelView,
    prefix: &str,
    q_in: TensorRef,
    kv_in: TensorRef,
    mask: Option<TensorRef>,
) -> TensorRef {
    let t = ctx.tape;
    let d = view.dims.d_model;
    let h = view.dims.n_heads;
    let dk = view.dims.d_k();
    let qs = t.shape(q_in);
    let kvs = t.shape(kv_in);
    let (bq, tq) = (qs[0], qs[1]);
    let (bk, tk) = (kvs[0], kvs[1]);

    let proj = |x: TensorRef, w: &str, bias: &str, b: usize, tl: usize| {
        let wp = ctx.binding.get(&format!("{prefix}.{w}"));
        let bp = ctx.binding.get(&format!("{prefix}.{bias}"));
        let y = t.add(t.matmul(x, wp), bp);
        // [b, tl, d] -> [b, h, tl, dk]
        let r = t.reshape(y, &[b, tl, h, dk]);
        t.transpose(r, &[0, 2, 1, 3])
    };
    let q = proj(q_in, "wq", "bq", bq, tq);
    let k = proj(kv_in, "wk", "bk", bk, tk);
    let v = proj(kv_in, "wv", "bv", bk, tk);

    let attended = attention_inner(t, q, k, v, mask, Some((ctx, view.dims.dropout_p)));
    let merged = t.transpose(attended, &[0, 2, 1, 3]);
    let flat = t.reshape(merged, &[bq, tq, d]);
    let wo = ctx.binding.get(&format!("{prefix}.wo"));
    let bo = ctx.binding.get(&format!("{prefix}.bo"));
    t.add(t.matmul(flat, wo), bo)
}

fn feed_forward(ctx: &ForwardCtx, view: &ModelView, prefix: &str, x: TensorRef) -> TensorRef {
    let t = ctx.tape;
    let w1 = ctx.binding.get(&format!("{prefix}.w1"));
    let b1 = ctx.binding.get(&format!("{prefix}.b1"));
    let w2 = ctx.binding.get(&format!("{prefix}.w2"));
    let b2 = ctx.binding.get(&format!("{prefix}.b2"));
    let h = t.relu(t.add(t.matmul(x, w1), b1));
    let h = ctx.dropout(h, view.dims.dropout_p);
    t.add(t.matmul(h, w2), b2)
}

// ── Sublayer pipelines ─────────────────────────────────────────────────

/// Residual sublayer in either order:
/// pre:  `x + dropout(f(LN(x)))`
/// post: `LN(x + dropout(f(x)))`
pub fn sublayer_forward(
    ctx: &ForwardCtx,
    x: TensorRef,
    norm_prefix: &str,
    style: NormStyle,
    dropout_p: f64,
    f: impl FnOnce(TensorRef) -> TensorRef,
) -> TensorRef {
    let t = ctx.tape;
    let gain = ctx.binding.get(&format!("{norm_prefix}.gain"));
    let bias = ctx.binding.get(&format!("{norm_prefix}.bias"));
    match style {
        NormStyle::Pre => {
            let normed = t.layer_norm(x, gain, bias, LN_EPS);
            let y = ctx.dropout(f(normed), dropout_p);
            t.add(x, y)
        }
        NormStyle::Post => {
            let y = ctx.dropout(f(x), dropout_p);
            let summed = t.add(x, y);
            t.layer_norm(summed, gain, bias, LN_EPS)
        }
    }
}

// ── Masks ──────────────────────────────────────────────────────────────

/// Additive key-pad mask `[b, 1, 1, n]`: 0 keeps, -1e9 silences.
fn key_pad_mask(tape: &Tape, tokens: &[u32], b: usize, n: usize) -> TensorRef {
    let data: Vec<f64> = tokens
        .iter()
        .map(|&t| if t == PAD { MASKED_SCORE } else { 0.0 })
        .collect();
    tape.constant(&Tensor::new(vec![b, 1, 1, n], data))
}

/// Combined causal + key-pad mask for decoder self-attention,
/// `[b, 1, t, t]`.
fn causal_pad_mask(tape: &Tape, tgt_in: &[u32], b: usize, t: usize) -> TensorRef {
    let mut data = vec![0.0; b * t * t];
    for r in 0..b {
        for qpos in 0..t {
            for kpos in 0..t {
                let pad_key = tgt_in[r * t + kpos] == PAD;
                if kpos > qpos || pad_key {
                    data[r * t * t + qpos * t + kpos] = MASKED_SCORE;
                }
            }
        }
    }
    tape.constant(&Tensor::new(vec![b, 1, t, t], data))
}

// ── Stacks ─────────────────────────────────────────────────────────────

fn embed(ctx: &ForwardCtx, view: &ModelView, tokens: &[u32], b: usize, len: usize) -> TensorRef {
    let t = ctx.tape;
    let d = view.dims.d_model;
    assert!(
        len <= view.dims.max_len,
        "sequence length {} exceeds max_len {}",
        len,
        view.dims.max_len
    );
    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let table = ctx.binding.get("embed.weight");
    let e = t.gather(table, &ids, &[b, len]);
    let scaled = t.scale(e, (d as f64).sqrt());
    let pos = t.constant(&sinusoidal_positions(len, d));
    t.add(scaled, pos)
}

/// Encoder stack over `src` tokens `[b, n]`. Returns the encoder output
/// `[b, n, d]` and the additive source mask for cross-attention.
pub fn encode(
    view: &ModelView,
    ctx: &ForwardCtx,
    src: &[u32],
    b: usize,
    n: usize,
) -> (TensorRef, TensorRef) {
    let t = ctx.tape;
    let style = view.dims.norm_style;
    let p = view.dims.dropout_p;
    let src_mask = key_pad_mask(t, src, b, n);
    let mut x = embed(ctx, view, src, b, n);
    for &j in &view.enc_layers {
        let lp = enc_layer_prefix(j);
        x = sublayer_forward(ctx, x, &format!("{lp}.attn_norm"), style, p, |y| {
            multi_head_attention(ctx, view, &format!("{lp}.attn"), y, y, Some(src_mask))
        });
        x = sublayer_forward(ctx, x, &format!("{lp}.ffn_norm"), style, p, |y| {
            feed_forward(ctx, view, &format!("{lp}.ffn"), y)
        });
    }
    if style == NormStyle::Pre {
        let gain = ctx.binding.get("enc.final_norm.gain");
        let bias = ctx.binding.get("enc.final_norm.bias");
        x = t.layer_norm(x, gain, bias, LN_EPS);
    }
    (x, src_mask)
}

/// Decoder stack over the shifted target `tgt_in` `[b, t]`, attending
/// `enc_out` through `src_mask`. Returns vocabulary logits `[b, t, V]`.
/// The causal mask forbids every position from attending to later ones.
pub fn decode_logits(
    view: &ModelView,
    ctx: &ForwardCtx,
    enc_out: TensorRef,
    src_mask: TensorRef,
    tgt_in: &[u32],
    b: usize,
    tlen: usize,
) -> TensorRef {
    let t = ctx.tape;
    let d = view.dims.d_model;
    let enc_shape = t.shape(enc_out);
    assert_eq!(
        *enc_shape.last().unwrap(),
        d,
        "decode: encoder output trailing dim {} does not match d_model {}",
        enc_shape.last().unwrap(),
        d
    );
    let style = view.dims.norm_style;
    let p = view.dims.dropout_p;
    let self_mask = causal_pad_mask(t, tgt_in, b, tlen);
    let mut x = embed(ctx, view, tgt_in, b, tlen);
    for &j in &view.dec_layers {
        let lp = dec_layer_prefix(j);
        x = sublayer_forward(ctx, x, &format!("{lp}.self_norm"), style, p, |y| {
            multi_head_attention(ctx, view, &format!("{lp}.self_attn"), y, y, Some(self_mask))
        });
        x = sublayer_forward(ctx, x, &format!("{lp}.cross_norm"), style, p, |y| {
            multi_head_attention(
                ctx,
                view,
                &format!("{lp}.cross_attn"),
                y,
                enc_out,
                Some(src_mask),
            )
        });
        x = sublayer_forward(ctx, x, &format!("{lp}.ffn_norm"), style, p, |y| {
            feed_forward(ctx, view, &format!("{lp}.ffn"), y)
        });
    }
    if style == NormStyle::Pre {
        let gain = ctx.binding.get("dec.final_norm.gain");
        let bias = ctx.binding.get("dec.final_norm.bias");
        x = t.layer_norm(x, gain, bias, LN_EPS);
    }
    let out_w = ctx.binding.get("out.weight");
    t.matmul(x, out_w)
}

/// Full teacher-forced forward for a batch: logits `[b, t, V]`.
pub fn batch_logits(view: &ModelView, ctx: &ForwardCtx, batch: &Batch) -> TensorRef {
    let (enc_out, src_mask) = encode(view, ctx, &batch.src, batch.batch, batch.src_len);
    decode_logits(
        view,
        ctx,
        enc_out,
        src_mask,
        &batch.tgt_in,
        batch.batch,
        batch.tgt_len,
    )
}

// ── Sequence log-probabilities ─────────────────────────────────────────

/// Per-sentence sum over non-pad positions of `log p(y_t | y_<t, X)`,
/// differentiable; shape `[b]`. True-distribution log-softmax, no label
/// smoothing. The row-max subtraction uses a detached constant, which
/// leaves the gradient exact.
pub fn sentence_log_probs(tape: &Tape, logits: TensorRef, batch: &Batch) -> TensorRef {
    let shape = tape.shape(logits);
    let (b, tl, v) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!((b, tl), (batch.batch, batch.tgt_len));
    let vals = tape.value(logits);
    let mut maxes = vec![f64::NEG_INFINITY; b * tl];
    for (row, m) in vals.data().chunks(v).zip(maxes.iter_mut()) {
        for &x in row {
            if x > *m {
                *m = x;
            }
        }
    }
    let m = tape.constant(&Tensor::new(vec![b, tl, 1], maxes));
    let xm = tape.sub(logits, m);
    let e = tape.exp(xm);
    let denom = tape.reduce_sum(e, Some(2));
    let log_denom = tape.log(denom);
    let log_denom = tape.reshape(log_denom, &[b, tl, 1]);
    let lsm = tape.sub(xm, log_denom);

    let mut onehot = vec![0.0; b * tl * v];
    for (pos, &tok) in batch.tgt_out.iter().enumerate() {
        if tok != PAD {
            onehot[pos * v + tok as usize] = 1.0;
        }
    }
    let oh = tape.constant(&Tensor::new(vec![b, tl, v], onehot));
    let picked = tape.mul(lsm, oh);
    let per_pos = tape.reduce_sum(picked, Some(2));
    tape.reduce_sum(per_pos, Some(1))
}

/// Evaluation-mode `log P(Y|X)` per sentence (dropout off, fresh tape).
pub fn log_prob_of_target(
    view: &ModelView,
    batch: &Batch,
    prec: crate::tensor::Precision,
) -> Vec<f64> {
    let tape = Tape::new(prec);
    let binding = Binding::new(&tape, view.store.clone(), false);
    let ctx = ForwardCtx::eval(&tape, &binding);
    let logits = batch_logits(view, &ctx, batch);
    let lp = sentence_log_probs(&tape, logits, batch);
    tape.value(lp).data().to_vec()
}
