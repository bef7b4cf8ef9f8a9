//! Deterministic synthetic translation tasks, vocabulary handling, and
//! token-budget batching. Also imports plain-text parallel corpora (one
//! whitespace-tokenized sentence per line).

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: u32 = 4;

/// Stable 64-bit content hash (FNV-1a). Split assignment and batching
/// tie-breaks go through this, never through `std`'s randomized hasher.
pub fn fnv1a(tokens: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1_0000_01b3);
        }
    }
    h
}

// ── Vocabulary ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Synthetic vocabulary of the given size: reserved ids plus numbered
    /// payload tokens.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < RESERVED as usize + 1 {
            return Err(Error::Data(format!(
                "vocab size {size} too small: needs the {RESERVED} reserved ids plus payload"
            )));
        }
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in RESERVED as usize..size {
            tokens.push(format!("t{i}"));
        }
        Ok(Vocab::from_tokens(tokens))
    }

    /// Vocabulary from corpus text: tokens at or above `min_freq`, in
    /// frequency-then-lexicographic order after the reserved ids.
    pub fn from_corpus<'a>(lines: impl Iterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> =
            freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Vocab::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    /// Space-joined payload tokens (reserved ids skipped).
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= RESERVED)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── Sentence pairs and tasks ───────────────────────────────────────────

/// Source/target token pair. The target always terminates with `EOS`;
/// payload positions never contain reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Lexmap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub pairs: usize,
    pub seed: u64,
    pub lexmap_seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            task: TaskKind::Lexmap,
            vocab_size: 64,
            len_min: 4,
            len_max: 16,
            pairs: 10_000,
            seed: 1,
            lexmap_seed: 17,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::Data(format!(
                "invalid length range [{}, {}]",
                self.len_min, self.len_max
            )));
        }
        if self.vocab_size <= RESERVED as usize {
            return Err(Error::Data(format!(
                "vocab size {} leaves no payload tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Fixed bijection over payload ids used by the lexmap task.
    pub fn permutation(&self) -> Vec<u32> {
        let payload = self.vocab_size as u32 - RESERVED;
        let mut perm: Vec<u32> = (RESERVED..RESERVED + payload).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.lexmap_seed);
        perm.shuffle(&mut rng);
        perm
    }

    pub fn target_for(&self, src: &[u32], perm: &[u32]) -> Vec<u32> {
        let mut tgt: Vec<u32> = match self.task {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Lexmap => src
                .iter()
                .rev()
                .map(|&t| perm[(t - RESERVED) as usize])
                .collect(),
        };
        tgt.push(EOS);
        tgt
    }

    /// Distinct source sequences expressible under this spec (saturating).
    fn capacity(&self) -> u128 {
        let payload = (self.vocab_size - RESERVED as usize) as u128;
        let mut total: u128 = 0;
        for len in self.len_min..=self.len_max {
            let mut c: u128 = 1;
            for _ in 0..len {
                c = c.saturating_mul(payload);
                if c > u128::MAX / 2 {
                    return u128::MAX;
                }
            }
            total = total.saturating_add(c);
        }
        total
    }
}

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Vec<SentencePair>,
    pub valid: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
    pub vocab: Vocab,
}

/// Generates disjoint train/valid/test splits of distinct source
/// sequences. Split membership hashes the source tokens, so no sequence
/// can leak across splits, and regeneration with the same spec is
/// bit-identical.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<DataSplits> {
    spec.validate()?;
    let capacity = spec.capacity();
    if (spec.pairs as u128) > capacity {
        return Err(Error::Data(format!(
            "requested {} pairs but only {} distinct sources exist for this spec",
            spec.pairs, capacity
        )));
    }
    let vocab = Vocab::synthetic(spec.vocab_size)?;
    let perm = spec.permutation();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let payload = spec.vocab_size as u32 - RESERVED;
    let mut attempts: u64 = 0;
    let max_attempts = (spec.pairs as u64).saturating_mul(1000).max(1_000_000);
    while seen.len() < spec.pairs {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Data(format!(
                "could not draw {} distinct sources after {attempts} attempts",
                spec.pairs
            )));
        }
        let len = rng.random_range(spec.len_min..=spec.len_max);
        let src: Vec<u32> = (0..len)
            .map(|_| RESERVED + rng.random_range(0..payload))
            .collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let pair = SentencePair {
            tgt: spec.target_for(&src, &perm),
            src,
        };
        match fnv1a(&pair.src) % 20 {
            18 => valid.push(pair),
            19 => test.push(pair),
            _ => train.push(pair),
        }
    }
    Ok(DataSplits {
        train,
        valid,
        test,
        vocab,
    })
}

// ── Batching ───────────────────────────────────────────────────────────

/// Padded batch: `src` is `[batch, src_len]`, `tgt_in` the bos-shifted
/// decoder input and `tgt_out` the prediction targets, both
/// `[batch, tgt_len]`. Pad cells hold `PAD`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
}

impl Batch {
    pub fn from_pairs(pairs: &[SentencePair]) -> Batch {
        assert!(!pairs.is_empty(), "batch needs at least one pair");
        let b = pairs.len();
        let src_len = pairs.iter().map(|p| p.src.len()).max().unwrap();
        let tgt_len = pairs.iter().map(|p| p.tgt.len()).max().unwrap();
        let mut src = vec![PAD; b * src_len];
        let mut tgt_in = vec![PAD; b * tgt_len];
        let mut tgt_out = vec![PAD; b * tgt_len];
        for (r, p) in pairs.iter().enumerate() {
            src[r * src_len..r * src_len + p.src.len()].copy_from_slice(&p.src);
            tgt_in[r * tgt_len] = BOS;
            tgt_in[r * tgt_len + 1..r * tgt_len + p.tgt.len()]
                .copy_from_slice(&p.tgt[..p.tgt.len() - 1]);
            tgt_out[r * tgt_len..r * tgt_len + p.tgt.len()].copy_from_slice(&p.tgt);
        }
        Batch {
            batch: b,
            src_len,
            tgt_len,
            src,
            tgt_in,
            tgt_out,
        }
    }

    /// 1.0 at non-pad target positions, 0.0 at pads; `[batch, tgt_len]`.
    pub fn tgt_nonpad(&self) -> Vec<f64> {
        self.tgt_out
            .iter()
            .map(|&t| if t == PAD { 0.0 } else { 1.0 })
            .collect()
    }

    pub fn nonpad_target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }

    pub fn src_rows(&self) -> impl Iterator<Item = &[u32]> {
        self.src.chunks(self.src_len)
    }
}

/// Buckets pairs by length so each batch's padded source cells and padded
/// target cells both stay within `token_budget`. Every pair lands in
/// exactly one batch.
pub fn batch_by_length(pairs: &[SentencePair], token_budget: usize) -> Result<Vec<Batch>> {
    for p in pairs {
        if p.src.len() > token_budget || p.tgt.len() > token_budget {
            return Err(Error::Data(format!(
                "pair with src len {} / tgt len {} exceeds token budget {}",
                p.src.len(),
                p.tgt.len(),
                token_budget
            )));
        }
    }
    let mut order: Vec<&SentencePair> = pairs.iter().collect();
    order.sort_by_key(|p| (p.src.len().max(p.tgt.len()), p.src.len(), fnv1a(&p.src)));
    let mut batches = Vec::new();
    let mut current: Vec<SentencePair> = Vec::new();
    let (mut max_src, mut max_tgt) = (0usize, 0usize);
    for p in order {
        let ns = max_src.max(p.src.len());
        let nt = max_tgt.max(p.tgt.len());
        let n = current.len() + 1;
        if !current.is_empty() && (n * ns > token_budget || n * nt > token_budget) {
            batches.push(Batch::from_pairs(&current));
            current.clear();
            max_src = 0;
            max_tgt = 0;
        }
        max_src = max_src.max(p.src.len());
        max_tgt = max_tgt.max(p.tgt.len());
        current.push(p.clone());
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(&current));
    }
    Ok(batches)
}

// ── Plain-text corpus import ───────────────────────────────────────────

/// Parses parallel source/target text: one sentence per line, whitespace
/// tokens. The vocabulary is built from both sides with the given
/// frequency cutoff; out-of-vocabulary tokens map to `<unk>`.
pub fn import_parallel_text(
    src_text: &str,
    tgt_text: &str,
    min_freq: usize,
    max_len: usize,
) -> Result<(Vec<SentencePair>, Vocab)> {
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Data(format!(
            "parallel corpus line counts differ: {} source vs {} target",
            src_lines.len(),
            tgt_lines.len()
        )));
    }
    let vocab = Vocab::from_corpus(src_lines.iter().chain(tgt_lines.iter()).copied(), min_freq);
    let mut pairs = Vec::new();
    for (lineno, (s, t)) in src_lines.iter().zip(tgt_lines.iter()).enumerate() {
        let src: Vec<u32> = s.split_whitespace().map(|w| vocab.id(w)).collect();
        let mut tgt: Vec<u32> = t.split_whitespace().map(|w| vocab.id(w)).collect();
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Data(format!(
                "empty sentence at line {}",
                lineno + 1
            )));
        }
        if src.len() > max_len || tgt.len() + 1 > max_len {
            return Err(Error::Data(format!(
                "sentence at line {} exceeds max length {}",
                lineno + 1,
                max_len
            )));
        }
        tgt.push(EOS);
        pairs.push(SentencePair { src, tgt });
    }
    Ok((pairs, vocab))
}
