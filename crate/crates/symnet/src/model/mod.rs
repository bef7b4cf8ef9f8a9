//! Encoder-decoder Transformer parameterized by depth, resolving every
//! weight through a named [`ParameterStore`] so that several model views
//! (deep and shallow) can run off one storage substrate.

mod forward;
#[cfg(test)]
mod tests;

pub use forward::{
    batch_logits, decode_logits, encode, log_prob_of_target, scaled_dot_product_attention,
    sentence_log_probs, sinusoidal_positions, sublayer_forward, Binding, ForwardCtx,
};

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Precision;

/// Sublayer pipeline order: `pre` normalizes before the transform
/// (normalize -> transform -> dropout -> residual add), `post` after the
/// residual add (transform -> dropout -> residual add -> normalize).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormStyle {
    Pre,
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub norm_style: NormStyle,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 64,
            max_len: 64,
            dropout_p: 0.1,
            norm_style: NormStyle::Pre,
        }
    }
}

impl ModelDims {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(crate::Error::Config("model dims must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(crate::Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(crate::Error::Config(format!(
                "model.dropout_p ({}) must be in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

// ── Parameter storage ──────────────────────────────────────────────────

static NEXT_STORAGE_ID: AtomicU64 = AtomicU64::new(1);

/// One named trainable tensor. `storage_id` is unique per allocation and
/// is what sharing checks compare: two views share a parameter iff they
/// resolve to the same id in the same store.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub storage_id: u64,
}

impl Parameter {
    fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Parameter {
            shape,
            values,
            storage_id: NEXT_STORAGE_ID.fetch_add(1, Ordering::Relaxed),
        }
    }
}

/// Named, uniquely-identified trainable tensors. Iteration order is the
/// lexicographic name order, which keeps every consumer deterministic.
#[derive(Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

pub type SharedStore = Rc<RefCell<ParameterStore>>;

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        assert!(
            !self.params.contains_key(name),
            "parameter name {name:?} inserted twice"
        );
        self.params
            .insert(name.to_string(), Parameter::new(shape, values));
    }

    pub fn get(&self, name: &str) -> &Parameter {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not found in store"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not found in store"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Deep copy with fresh storage identities. Used as the negative
    /// control for sharing verification: values are equal, storage is not.
    pub fn clone_detached(&self) -> Self {
        let mut out = ParameterStore::new();
        for (name, p) in self.params.iter() {
            out.insert(name, p.shape.clone(), p.values.clone());
        }
        out
    }

    pub fn shared(self) -> SharedStore {
        Rc::new(RefCell::new(self))
    }
}

// ── Canonical parameter schema ─────────────────────────────────────────

fn attn_names(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    for w in ["wq", "wk", "wv", "wo"] {
        v.push((format!("{prefix}.{w}"), vec![d, d]));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        v.push((format!("{prefix}.{b}"), vec![d]));
    }
    v
}

fn norm_names(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.gain"), vec![d]),
        (format!("{prefix}.bias"), vec![d]),
    ]
}

fn ffn_names(prefix: &str, d: usize, dff: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.w1"), vec![d, dff]),
        (format!("{prefix}.b1"), vec![dff]),
        (format!("{prefix}.w2"), vec![dff, d]),
        (format!("{prefix}.b2"), vec![d]),
    ]
}

pub fn enc_layer_prefix(idx: usize) -> String {
    format!("enc.layer.{idx}")
}

pub fn dec_layer_prefix(idx: usize) -> String {
    format!("dec.layer.{idx}")
}

/// All parameter names and shapes of a model with the given depths, in
/// canonical construction order (which fixes the init RNG consumption).
pub fn schema(dims: &ModelDims, enc_depth: usize, dec_depth: usize) -> Vec<(String, Vec<usize>)> {
    let (d, dff, v) = (dims.d_model, dims.d_ffn, dims.vocab_size);
    let mut names = vec![("embed.weight".to_string(), vec![v, d])];
    for i in 0..enc_depth {
        let p = enc_layer_prefix(i);
        names.extend(attn_names(&format!("{p}.attn"), d));
        names.extend(norm_names(&format!("{p}.attn_norm"), d));
        names.extend(ffn_names(&format!("{p}.ffn"), d, dff));
        names.extend(norm_names(&format!("{p}.ffn_norm"), d));
    }
    if dims.norm_style == NormStyle::Pre {
        names.extend(norm_names("enc.final_norm", d));
    }
    for i in 0..dec_depth {
        let p = dec_layer_prefix(i);
        names.extend(attn_names(&format!("{p}.self_attn"), d));
        names.extend(norm_names(&format!("{p}.self_norm"), d));
        names.extend(attn_names(&format!("{p}.cross_attn"), d));
        names.extend(norm_names(&format!("{p}.cross_norm"), d));
        names.extend(ffn_names(&format!("{p}.ffn"), d, dff));
        names.extend(norm_names(&format!("{p}.ffn_norm"), d));
    }
    if dims.norm_style == NormStyle::Pre {
        names.extend(norm_names("dec.final_norm", d));
    }
    names.push(("out.weight".to_string(), vec![d, v]));
    names
}

/// Encoder layer index of a parameter name, when it belongs to one.
pub fn encoder_layer_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("enc.layer.")?;
    let idx: usize = rest.split('.').next()?.parse().ok()?;
    Some(idx)
}

fn init_values(name: &str, shape: &[usize], dims: &ModelDims, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    if name.ends_with(".gain") {
        return vec![1.0; n];
    }
    if shape.len() == 1 {
        // every 1-d parameter that is not a norm gain is a bias
        return vec![0.0; n];
    }
    if name == "embed.weight" {
        let a = (3.0 / dims.d_model as f64).sqrt();
        return (0..n).map(|_| rng.random_range(-a..a)).collect();
    }
    // xavier-uniform for weight matrices
    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

/// Fresh parameter store for a model of the given depths, drawn from a
/// seeded generator in canonical order (same seed, same bits).
pub fn init_store(
    dims: &ModelDims,
    enc_depth: usize,
    dec_depth: usize,
    seed: u64,
    prec: Precision,
) -> ParameterStore {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for (name, shape) in schema(dims, enc_depth, dec_depth) {
        let mut values = init_values(&name, &shape, dims, &mut rng);
        prec.quantize_slice(&mut values);
        store.insert(&name, shape, values);
    }
    store
}

// ── Model views ────────────────────────────────────────────────────────

/// A runnable encoder-decoder over a parameter store. `enc_layers[i]`
/// names the store layer backing the view's i-th encoder layer, so a
/// shallow view can run off a deep store.
#[derive(Clone)]
pub struct ModelView {
    pub dims: ModelDims,
    pub enc_layers: Vec<usize>,
    pub dec_layers: Vec<usize>,
    pub store: SharedStore,
    pub label: String,
}

impl ModelView {
    pub fn standalone(
        dims: ModelDims,
        enc_depth: usize,
        dec_depth: usize,
        store: SharedStore,
    ) -> Self {
        ModelView {
            dims,
            enc_layers: (0..enc_depth).collect(),
            dec_layers: (0..dec_depth).collect(),
            store,
            label: "model".to_string(),
        }
    }

    /// Names of every parameter this view resolves during a forward pass.
    pub fn param_names(&self) -> Vec<String> {
        let (d, dff) = (self.dims.d_model, self.dims.d_ffn);
        let mut out: Vec<String> = vec!["embed.weight".into()];
        for &j in &self.enc_layers {
            let p = enc_layer_prefix(j);
            for (n, _) in attn_names(&format!("{p}.attn"), d) {
                out.push(n);
            }
            for (n, _) in norm_names(&format!("{p}.attn_norm"), d) {
                out.push(n);
            }
            for (n, _) in ffn_names(&format!("{p}.ffn"), d, dff) {
                out.push(n);
            }
            for (n, _) in norm_names(&format!("{p}.ffn_norm"), d) {
                out.push(n);
            }
        }
        if self.dims.norm_style == NormStyle::Pre {
            for (n, _) in norm_names("enc.final_norm", d) {
                out.push(n);
            }
        }
        for &j in &self.dec_layers {
            let p = dec_layer_prefix(j);
            for (n, _) in attn_names(&format!("{p}.self_attn"), d) {
                out.push(n);
            }
            for (n, _) in norm_names(&format!("{p}.self_norm"), d) {
                out.push(n);
            }
            for (n, _) in attn_names(&format!("{p}.cross_attn"), d) {
                out.push(n);
            }
            for (n, _) in norm_names(&format!("{p}.cross_norm"), d) {
                out.push(n);
            }
            for (n, _) in ffn_names(&format!("{p}.ffn"), d, dff) {
                out.push(n);
            }
            for (n, _) in norm_names(&format!("{p}.ffn_norm"), d) {
                out.push(n);
            }
        }
        if self.dims.norm_style == NormStyle::Pre {
            for (n, _) in norm_names("dec.final_norm", d) {
                out.push(n);
            }
        }
        out.push("out.weight".into());
        out
    }
}
