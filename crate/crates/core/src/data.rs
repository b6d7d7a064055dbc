//! Synthetic corpora for desk-scale training and evaluation.
//!
//! * `copy`: windows holding short random strings recorded as `#s;` and
//!   queried later as `@s;`.
//! * `keyvalue`: windows holding up to three `#k=ddddd;` records followed by
//!   one `?k=ddddd` query per record. The window ends with a query.
//! * `lm_mix`: a continuous stream, 75% Markov text sentences and 25%
//!   structured record/query segments.
//!
//! Filler text comes from a fixed order-2 byte Markov chain over lowercase
//! letters, space and period. The chain itself never changes; corpus seeds
//! only drive sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tokenizer::BOS;

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz .";
const SUCCESSORS: usize = 4;
const CHAIN_SEED: u64 = 0xC0C_A1AB_5EED;

/// Fixed order-2 Markov chain used for filler text.
#[derive(Debug, Clone)]
pub struct MarkovText {
    // per context (a, b): successor symbol indices and cumulative weights
    next: Vec<[(u8, f64); SUCCESSORS]>,
}

impl Default for MarkovText {
    fn default() -> Self {
        Self::new()
    }
}

impl MarkovText {
    pub fn new() -> Self {
        let n = ALPHABET.len();
        let mut rng = ChaCha8Rng::seed_from_u64(CHAIN_SEED);
        let mut next = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            let mut entry = [(0u8, 0.0); SUCCESSORS];
            let mut total = 0.0;
            for slot in entry.iter_mut() {
                let sym = rng.random_range(0..n) as u8;
                let w: f64 = rng.random_range(0.1..1.0);
                total += w;
                *slot = (sym, total);
            }
            for slot in entry.iter_mut() {
                slot.1 /= total;
            }
            next.push(entry);
        }
        Self { next }
    }

    fn index(byte: u8) -> usize {
        ALPHABET.iter().position(|&b| b == byte).unwrap_or(26)
    }

    /// Appends `len` bytes continuing from the last two bytes of `out`.
    pub fn extend(&self, out: &mut Vec<u8>, len: usize, rng: &mut impl Rng) {
        let n = ALPHABET.len();
        let (mut a, mut b) = match out.as_slice() {
            [.., x, y] => (Self::index(*x), Self::index(*y)),
            [y] => (26, Self::index(*y)),
            [] => (26, 26),
        };
        for _ in 0..len {
            let u: f64 = rng.random();
            let entry = &self.next[a * n + b];
            let sym = entry.iter().find(|(_, c)| u < *c).map_or(entry[SUCCESSORS - 1].0, |(s, _)| *s);
            out.push(ALPHABET[sym as usize]);
            a = b;
            b = sym as usize;
        }
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        self.extend(&mut out, len, rng);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Copy,
    Keyvalue,
    LmMix,
}

impl std::str::FromStr for CorpusKind {
    type Err = crate::CocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "keyvalue" => Ok(Self::Keyvalue),
            "lm_mix" => Ok(Self::LmMix),
            other => bail!(Config, "unknown corpus kind {other:?}"),
        }
    }
}

/// A token stream. Windowed kinds are a concatenation of self-contained
/// windows of `window` tokens (`seq_len + 1`, so each window yields
/// `seq_len` next-token targets).
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub window: usize,
    pub tokens: Vec<u32>,
}

impl Corpus {
    pub fn is_windowed(&self) -> bool {
        self.kind != CorpusKind::LmMix
    }

    pub fn n_windows(&self) -> usize {
        self.tokens.len() / self.window
    }

    /// Picks one training sample `(inputs, targets)` of `window - 1` tokens.
    pub fn sample(&self, rng: &mut impl Rng) -> (Vec<u32>, Vec<u32>) {
        let start = if self.is_windowed() {
            rng.random_range(0..self.n_windows()) * self.window
        } else {
            rng.random_range(0..=self.tokens.len() - self.window)
        };
        let w = &self.tokens[start..start + self.window];
        (w[..w.len() - 1].to_vec(), w[1..].to_vec())
    }
}

pub const KEY_RECORD_LEN: usize = 9; // "#k=ddddd;"
pub const KEY_QUERY_LEN: usize = 8; // "?k=ddddd"

pub fn key_record(key: u8, value: u32) -> Vec<u8> {
    format!("#{}={value:05};", key as char).into_bytes()
}

pub fn key_query(key: u8, value: u32) -> Vec<u8> {
    format!("?{}={value:05}", key as char).into_bytes()
}

fn random_value(rng: &mut impl Rng) -> u32 {
    rng.random_range(10_000..=99_999)
}

fn random_word(rng: &mut impl Rng, len: usize) -> Vec<u8> {
    (0..len).map(|_| b'a' + rng.random_range(0..26u8)).collect()
}

/// Splits `total` into `parts` non-negative sizes.
fn random_split(rng: &mut impl Rng, total: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=total)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

fn keyvalue_window(text: &MarkovText, window: usize, rng: &mut impl Rng) -> Vec<u8> {
    let body = window - 1;
    let max_records = (body / (KEY_RECORD_LEN + KEY_QUERY_LEN + 4)).clamp(1, 3);
    let n_records = rng.random_range(1..=max_records);
    let mut keys: Vec<u8> = Vec::with_capacity(n_records);
    while keys.len() < n_records {
        let k = b'a' + rng.random_range(0..26u8);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let values: Vec<u32> = (0..n_records).map(|_| random_value(rng)).collect();
    // every record is queried once, after all records, in shuffled order
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(rng);
    let filler = body - n_records * (KEY_RECORD_LEN + KEY_QUERY_LEN);
    let gaps = random_split(rng, filler, 2 * n_records);
    let mut out = Vec::with_capacity(body);
    for i in 0..n_records {
        text.extend(&mut out, gaps[i], rng);
        out.extend(key_record(keys[i], values[i]));
    }
    for (i, &q) in order.iter().enumerate() {
        text.extend(&mut out, gaps[n_records + i], rng);
        out.extend(key_query(keys[q], values[q]));
    }
    debug_assert_eq!(out.len(), body);
    out
}

fn copy_window(text: &MarkovText, window: usize, rng: &mut impl Rng) -> Vec<u8> {
    let body = window - 1;
    let word_len = 6;
    let item = word_len + 2;
    let max_pairs = (body / (2 * item + 2)).clamp(1, 3);
    let n = rng.random_range(1..=max_pairs);
    let mut words: Vec<Vec<u8>> = Vec::with_capacity(n);
    while words.len() < n {
        let w = random_word(rng, word_len);
        if !words.contains(&w) {
            words.push(w);
        }
    }
    // records in order, then queries in a shuffled order
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let filler = body - 2 * n * item;
    let gaps = random_split(rng, filler, 2 * n + 1);
    let mut out = Vec::with_capacity(body);
    for (i, w) in words.iter().enumerate() {
        text.extend(&mut out, gaps[i], rng);
        out.push(b'#');
        out.extend_from_slice(w);
        out.push(b';');
    }
    for (i, &o) in order.iter().enumerate() {
        text.extend(&mut out, gaps[n + i], rng);
        out.push(b'@');
        out.extend_from_slice(&words[o]);
        out.push(b';');
    }
    text.extend(&mut out, gaps[2 * n], rng);
    debug_assert_eq!(out.len(), body);
    out
}

fn lm_mix_stream(text: &MarkovText, size: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(size + 64);
    let mut open: Vec<(u8, u32)> = Vec::new();
    while out.len() < size {
        if rng.random_bool(0.75) {
            let len = rng.random_range(12..48);
            text.extend(&mut out, len, rng);
        } else if !open.is_empty() && rng.random_bool(0.5) {
            let (k, v) = open.remove(rng.random_range(0..open.len()));
            out.extend(key_query(k, v));
        } else {
            let k = b'a' + rng.random_range(0..26u8);
            open.retain(|(key, _)| *key != k);
            let v = random_value(rng);
            out.extend(key_record(k, v));
            open.push((k, v));
        }
    }
    out.truncate(size);
    out
}

/// Deterministic synthetic token stream of `size_tokens` tokens (rounded
/// down to whole windows for windowed kinds).
pub fn synth_corpus(kind: CorpusKind, size_tokens: usize, window: usize, seed: u64) -> Result<Corpus> {
    if window < 2 {
        bail!(Config, "window must hold at least two tokens");
    }
    if size_tokens < window {
        bail!(Input, "corpus size {size_tokens} is smaller than one window of {window}");
    }
    let min_window = match kind {
        CorpusKind::Keyvalue => 1 + KEY_RECORD_LEN + KEY_QUERY_LEN,
        CorpusKind::Copy => 1 + 2 * 8,
        CorpusKind::LmMix => 2,
    };
    if window < min_window {
        bail!(Config, "{kind:?} windows need at least {min_window} tokens, got {window}");
    }
    let text = MarkovText::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = match kind {
        CorpusKind::LmMix => {
            let mut t = vec![BOS];
            t.extend(lm_mix_stream(&text, size_tokens - 1, &mut rng).into_iter().map(u32::from));
            t
        }
        CorpusKind::Keyvalue | CorpusKind::Copy => {
            let n = size_tokens / window;
            let mut t = Vec::with_capacity(n * window);
            for _ in 0..n {
                t.push(BOS);
                let body = if kind == CorpusKind::Keyvalue {
                    keyvalue_window(&text, window, &mut rng)
                } else {
                    copy_window(&text, window, &mut rng)
                };
                t.extend(body.into_iter().map(u32::from));
            }
            t
        }
    };
    Ok(Corpus { kind, window, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_deterministic() {
        for kind in [CorpusKind::Copy, CorpusKind::Keyvalue, CorpusKind::LmMix] {
            let a = synth_corpus(kind, 2000, 65, 9).unwrap();
            let b = synth_corpus(kind, 2000, 65, 9).unwrap();
            let c = synth_corpus(kind, 2000, 65, 10).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.tokens, c.tokens);
        }
    }

    #[test]
    fn undersized_corpus_is_an_input_error() {
        assert!(matches!(synth_corpus(CorpusKind::Keyvalue, 64, 65, 0), Err(crate::CocaError::Input(_))));
        assert!(matches!(synth_corpus(CorpusKind::Keyvalue, 100, 12, 0), Err(crate::CocaError::Config(_))));
        assert!("markdown".parse::<CorpusKind>().is_err());
    }

    #[test]
    fn windows_start_with_bos_and_have_fixed_length() {
        let c = synth_corpus(CorpusKind::Keyvalue, 65 * 10 + 3, 65, 1).unwrap();
        assert_eq!(c.tokens.len(), 650);
        assert!(c.tokens.chunks(65).all(|w| w[0] == BOS && w[1..].iter().all(|&t| t < 256)));
    }

    #[test]
    fn markov_text_uses_the_filler_alphabet() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = MarkovText::new().sample(2000, &mut rng);
        assert!(s.iter().all(|b| ALPHABET.contains(b)));
        // every context has at most SUCCESSORS continuations
        let mut seen = std::collections::HashMap::<(u8, u8), std::collections::HashSet<u8>>::new();
        for w in s.windows(3) {
            seen.entry((w[0], w[1])).or_default().insert(w[2]);
        }
        assert!(seen.values().all(|n| n.len() <= SUCCESSORS));
    }
}
