//! Sliding-window perplexity and passkey retrieval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::Variant;
use crate::data::MarkovText;
use crate::error::{bail, Result};
use crate::model::{token_nlls, Model};
use crate::real::Real;
use crate::rotary::ntk_rescale_kappa;
use crate::tokenizer::{decode, BOS, EOS};

pub const DEFAULT_STRIDE: usize = 256;
pub const DEFAULT_PASSKEY_SAMPLES: usize = 100;
/// Only this many generated tokens are inspected for the passkey.
pub const SCORED_TOKENS: usize = 64;
pub const PASSKEY_MIN: u32 = 10_000;
pub const PASSKEY_MAX: u32 = 99_999;

/// Perplexity of `doc` with windows of `context_size` inputs advanced by
/// `stride`. The first window scores all of its targets, later windows only
/// the targets not scored before (at most `stride`).
pub fn sliding_window_ppl<T: Real>(model: &Model<T>, doc: &[u32], context_size: usize, stride: usize) -> Result<f64> {
    let (nats, n) = sliding_window_nll(model, doc, context_size, stride)?;
    Ok((nats / n as f64).exp())
}

/// Total negative log-likelihood (nats) and number of scored targets.
pub fn sliding_window_nll<T: Real>(
    model: &Model<T>,
    doc: &[u32],
    context_size: usize,
    stride: usize,
) -> Result<(f64, usize)> {
    if context_size == 0 || stride == 0 {
        bail!(Input, "context_size and stride must be positive");
    }
    if stride > context_size {
        bail!(Input, "stride {stride} exceeds the context size {context_size}; targets would go unscored");
    }
    if doc.len() < context_size || doc.len() < 2 {
        bail!(Input, "document of {} tokens is shorter than the context of {context_size}", doc.len());
    }
    let last = doc.len() - 1;
    let mut windows = Vec::new();
    let mut prev_end = 0;
    let mut begin = 0;
    loop {
        let end = (begin + context_size).min(last);
        windows.push((begin, end, end - prev_end));
        prev_end = end;
        if end == last {
            break;
        }
        begin += stride;
    }
    // windows are scored independently; the sum runs in window order
    let per_window: Vec<Result<f64>> = windows
        .par_iter()
        .map(|&(b, e, scored)| {
            let (logits, _) = model.forward(&doc[b..e], None)?;
            let nll = token_nlls(&logits, model.config.vocab_size, &doc[b + 1..e + 1])?;
            Ok(nll[nll.len() - scored..].iter().sum())
        })
        .collect();
    let mut total = 0.0;
    for r in per_window {
        total += r?;
    }
    Ok((total, last))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplRecord {
    pub context: usize,
    pub n_docs: usize,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplCurve {
    pub variant: Variant,
    pub ntk_kappa: f64,
    pub stride: usize,
    pub records: Vec<PplRecord>,
}

impl PplCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("context,ppl\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.6}\n", r.context, r.ppl));
        }
        s
    }
}

/// Perplexity per context size: per-document mean NLLs are averaged in nat
/// space, then exponentiated. The rotary table is extended (or NTK-rescaled
/// when `ntk_kappa > 1`) to cover the longest context.
pub fn ppl_curve<T: Real>(
    model: &Model<T>,
    docs: &[Vec<u32>],
    context_sizes: &[usize],
    stride: usize,
    ntk_kappa: f64,
) -> Result<PplCurve> {
    if docs.is_empty() {
        bail!(Input, "no documents to evaluate");
    }
    if context_sizes.is_empty() || context_sizes.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Input, "context sizes must be non-empty and strictly increasing");
    }
    let max_ctx = *context_sizes.last().expect("non-empty");
    if let Some(d) = docs.iter().find(|d| d.len() < max_ctx) {
        bail!(Input, "a document of {} tokens is shorter than the largest context {max_ctx}", d.len());
    }
    let mut m = model.clone();
    m.set_rotary(ntk_rescale_kappa(model.rotary(), ntk_kappa, model.rotary().default_ntk_exponent(), max_ctx)?)?;
    let mut records = Vec::with_capacity(context_sizes.len());
    for &ctx in context_sizes {
        let mut mean_nll = 0.0;
        for d in docs {
            let (nats, n) = sliding_window_nll(&m, d, ctx, stride.min(ctx))?;
            mean_nll += nats / n as f64;
        }
        records.push(PplRecord { context: ctx, n_docs: docs.len(), ppl: (mean_nll / docs.len() as f64).exp() });
    }
    Ok(PplCurve { variant: model.config.variant, ntk_kappa, stride, records })
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding with layer caches. Stops after `max_new` tokens, at EOS,
/// or as soon as `done` returns true for the tokens generated so far.
pub fn greedy_generate<T: Real>(
    model: &Model<T>,
    prompt: &[u32],
    max_new: usize,
    done: impl Fn(&[u32]) -> bool,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        bail!(Input, "empty prompt");
    }
    let v = model.config.vocab_size;
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(out);
    }
    let (logits, mut caches) = model.forward(prompt, None)?;
    let mut next = argmax(&logits[logits.len() - v..]) as u32;
    loop {
        out.push(next);
        if next == EOS || out.len() >= max_new || done(&out) {
            return Ok(out);
        }
        let (logits, c) = model.forward(&[next], Some(&caches))?;
        caches = c;
        next = argmax(&logits) as u32;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PasskeyTemplate {
    /// The natural-language prompt: preamble, repeated filler, the passkey
    /// sentence pair, more filler, question.
    Paper,
    /// The same layout in the record syntax of the keyvalue corpus, for
    /// byte-level desk models: Markov filler, `#p=ddddd;`, question `?p=`.
    Compact,
}

impl std::str::FromStr for PasskeyTemplate {
    type Err = crate::CocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "compact" => Ok(Self::Compact),
            other => bail!(Config, "unknown passkey template {other:?}"),
        }
    }
}

pub const PAPER_PREAMBLE: &str = "There is an important info hidden inside a lot of irrelevant text. Find it and memorize them. I will quiz you about the important information there.\n";
pub const PAPER_FILLER: &str =
    "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again.\n";
pub const PAPER_QUESTION: &str = "What is the pass key?";
const COMPACT_FILLER_LEN: usize = 40;
const COMPACT_FILLER_SEED: u64 = 7;

fn paper_passkey_line(key: u32) -> String {
    format!("The pass key is {key}. Remember it. {key} is the pass key.\n")
}

impl PasskeyTemplate {
    fn parts(self, key: u32) -> (String, String, String, String) {
        match self {
            Self::Paper => (PAPER_PREAMBLE.into(), PAPER_FILLER.into(), paper_passkey_line(key), PAPER_QUESTION.into()),
            Self::Compact => {
                let mut rng = ChaCha8Rng::seed_from_u64(COMPACT_FILLER_SEED);
                let mut filler = MarkovText::new().sample(COMPACT_FILLER_LEN, &mut rng);
                filler.push(b' ');
                let filler = String::from_utf8(filler).expect("ascii filler");
                (String::new(), filler, format!("#p={key};"), "?p=".into())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasskeySample {
    pub prompt_tokens: Vec<u32>,
    pub passkey: u32,
    /// Number of filler blocks before the passkey block.
    pub insert_index: usize,
    pub n_fillers: usize,
    pub target_len: usize,
}

impl PasskeySample {
    pub fn text(&self) -> String {
        decode(&self.prompt_tokens)
    }
}

fn render(template: PasskeyTemplate, key: u32, before: usize, after: usize) -> Vec<u32> {
    let (pre, filler, block, question) = template.parts(key);
    let mut s = pre;
    s.push_str(&filler.repeat(before));
    s.push_str(&block);
    s.push_str(&filler.repeat(after));
    s.push_str(&question);
    let mut t = vec![BOS];
    t.extend(s.bytes().map(u32::from));
    t
}

/// Smallest `target_len` the template can serve.
pub fn min_passkey_len(template: PasskeyTemplate) -> usize {
    render(template, PASSKEY_MIN, 1, 1).len()
}

/// Repeats the filler until the prompt reaches `target_len` tokens (at least
/// one filler on each side) and puts the passkey at a uniformly random
/// filler boundary.
pub fn gen_passkey_sample(target_len: usize, template: PasskeyTemplate, rng: &mut impl Rng) -> Result<PasskeySample> {
    let min = min_passkey_len(template);
    if target_len < min {
        bail!(Input, "target_len {target_len} cannot hold a {template:?} prompt (minimum {min})");
    }
    let passkey = rng.random_range(PASSKEY_MIN..=PASSKEY_MAX);
    let mut n_fillers = 2;
    while render(template, passkey, n_fillers, 0).len() < target_len {
        n_fillers += 1;
    }
    let insert_index = rng.random_range(1..n_fillers);
    let prompt_tokens = render(template, passkey, insert_index, n_fillers - insert_index);
    Ok(PasskeySample { prompt_tokens, passkey, insert_index, n_fillers, target_len })
}

/// True iff the passkey digits appear in the first 64 generated tokens.
pub fn score_passkey(generated: &[u32], passkey: u32) -> bool {
    let n = generated.len().min(SCORED_TOKENS);
    decode(&generated[..n]).contains(&passkey.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasskeyRecord {
    pub length: usize,
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasskeyCurve {
    pub variant: Variant,
    pub ntk_kappa: f64,
    pub template: PasskeyTemplate,
    pub records: Vec<PasskeyRecord>,
}

impl PasskeyCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,n,accuracy\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{:.4}\n", r.length, r.n, r.accuracy));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasskeyOptions {
    pub lengths: Vec<usize>,
    pub n_per_length: usize,
    pub ntk_kappa: f64,
    pub template: PasskeyTemplate,
    pub seed: u64,
}

impl Default for PasskeyOptions {
    fn default() -> Self {
        Self {
            lengths: vec![128, 256, 512, 1024],
            n_per_length: DEFAULT_PASSKEY_SAMPLES,
            ntk_kappa: 1.0,
            template: PasskeyTemplate::Compact,
            seed: 0,
        }
    }
}

/// Passkey accuracy per prompt length. Samples for each length come from
/// their own RNG stream, so lengths can be added without changing others.
pub fn passkey_suite<T: Real>(model: &Model<T>, opts: &PasskeyOptions) -> Result<PasskeyCurve> {
    if opts.n_per_length == 0 {
        bail!(Input, "n_per_length must be at least 1");
    }
    if opts.lengths.is_empty() || opts.lengths.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Input, "lengths must be non-empty and strictly increasing");
    }
    let mut per_length = Vec::with_capacity(opts.lengths.len());
    for &len in &opts.lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(len as u64);
        let samples = (0..opts.n_per_length)
            .map(|_| gen_passkey_sample(len, opts.template, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        per_length.push((len, samples));
    }
    // room for the longest prompt plus the scored generation
    let longest = per_length.iter().flat_map(|(_, s)| s.iter().map(|x| x.prompt_tokens.len())).max().unwrap_or(0);
    let table = ntk_rescale_kappa(
        model.rotary(),
        opts.ntk_kappa,
        model.rotary().default_ntk_exponent(),
        longest + SCORED_TOKENS,
    )?;
    let m = model.clone().with_rotary(table)?;
    let mut records = Vec::with_capacity(opts.lengths.len());
    for (len, samples) in per_length {
        let hits: Vec<Result<bool>> = samples
            .par_iter()
            .map(|s| {
                let key = s.passkey;
                // once found, later tokens cannot change the score
                let out = greedy_generate(&m, &s.prompt_tokens, SCORED_TOKENS, |g| score_passkey(g, key))?;
                Ok(score_passkey(&out, key))
            })
            .collect();
        let mut correct = 0;
        for h in hits {
            correct += h? as usize;
        }
        records.push(PasskeyRecord {
            length: len,
            n: opts.n_per_length,
            accuracy: correct as f64 / opts.n_per_length as f64,
        });
    }
    Ok(PasskeyCurve { variant: model.config.variant, ntk_kappa: opts.ntk_kappa, template: opts.template, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tokenizer::encode;

    fn tiny() -> Model<f64> {
        let mut c = ModelConfig::tiny(Variant::Coca, 3);
        c.vocab_size = crate::tokenizer::VOCAB_SIZE;
        c.max_seq = 64;
        init_model(&c).unwrap()
    }

    fn doc(n: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 37 + 11) % 200) as u32).collect()
    }

    #[test]
    fn full_stride_is_disjoint_windows() {
        let m = tiny();
        let d = doc(3 * 8 + 1);
        let ppl = sliding_window_ppl(&m, &d, 8, 8).unwrap();
        let mut nats = 0.0;
        for w in 0..3 {
            let s = w * 8;
            nats += 8.0 * m.loss(&d[s..s + 8], &d[s + 1..s + 9]).unwrap();
        }
        assert!((ppl - (nats / 24.0).exp()).abs() < 1e-9 * ppl);
    }

    #[test]
    fn doc_equal_to_context_is_a_single_pass() {
        let m = tiny();
        let d = doc(12);
        let direct = m.loss(&d[..11], &d[1..]).unwrap().exp();
        for stride in [1, 5, 12] {
            assert!((sliding_window_ppl(&m, &d, 12, stride).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut m = tiny();
        m.params.lm_head.iter_mut().for_each(|x| *x = 0.0);
        for stride in [1, 3, 7] {
            let p = sliding_window_ppl(&m, &doc(30), 7, stride).unwrap();
            assert!((p - 259.0).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn ppl_argument_errors() {
        let m = tiny();
        assert!(sliding_window_ppl(&m, &doc(5), 8, 4).is_err());
        assert!(sliding_window_ppl(&m, &doc(20), 8, 0).is_err());
        assert!(sliding_window_ppl(&m, &doc(20), 8, 9).is_err());
        assert!(ppl_curve(&m, &[], &[8], 4, 1.0).is_err());
    }

    #[test]
    fn single_doc_curve_matches_direct_ppl() {
        let m = tiny();
        let d = doc(40);
        let c = ppl_curve(&m, std::slice::from_ref(&d), &[16], 8, 1.0).unwrap();
        assert!((c.records[0].ppl - sliding_window_ppl(&m, &d, 16, 8).unwrap()).abs() < 1e-12);
        assert_eq!(c, ppl_curve(&m, &[d], &[16], 8, 1.0).unwrap());
    }

    #[test]
    fn paper_template_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let min = min_passkey_len(PasskeyTemplate::Paper);
        let s = gen_passkey_sample(min, PasskeyTemplate::Paper, &mut rng).unwrap();
        assert_eq!((s.n_fillers, s.insert_index), (2, 1));
        let text = s.text();
        let key = s.passkey.to_string();
        assert_eq!(text.matches(&key).count(), 2);
        assert!(text.contains(&format!("The pass key is {key}. Remember it. {key} is the pass key.")));
        assert!(text.starts_with(PAPER_PREAMBLE) && text.ends_with(PAPER_QUESTION));
        assert!(gen_passkey_sample(min - 1, PasskeyTemplate::Paper, &mut rng).is_err());
    }

    #[test]
    fn samples_reach_the_target_and_vary_only_in_key_and_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for template in [PasskeyTemplate::Paper, PasskeyTemplate::Compact] {
            let a = gen_passkey_sample(700, template, &mut rng).unwrap();
            let b = gen_passkey_sample(700, template, &mut rng).unwrap();
            assert!(a.prompt_tokens.len() >= 700);
            assert_eq!(a.n_fillers, b.n_fillers);
            assert_eq!(a.prompt_tokens.len(), b.prompt_tokens.len());
            assert_eq!(render(template, b.passkey, b.insert_index, b.n_fillers - b.insert_index), b.prompt_tokens);
        }
    }

    #[test]
    fn scoring_examples() {
        assert!(score_passkey(&encode("22841 is the key"), 22841));
        assert!(!score_passkey(&encode("228.The grass is green. The sky is blue."), 22841));
        assert!(!score_passkey(&[], 22841));
        let mut late = encode(&"x".repeat(62));
        late.extend(encode("22841"));
        assert!(!score_passkey(&late, 22841));
        let mut early = encode("22841");
        early.extend(encode(&"y".repeat(100)));
        assert!(score_passkey(&early, 22841));
    }

    #[test]
    fn zero_samples_is_an_input_error() {
        let opts = PasskeyOptions { n_per_length: 0, lengths: vec![40], ..PasskeyOptions::default() };
        assert!(matches!(passkey_suite(&tiny(), &opts), Err(crate::CocaError::Input(_))));
    }

    #[test]
    fn untrained_model_scores_near_zero_and_kappa_one_is_identity() {
        let m = tiny();
        let opts = PasskeyOptions { n_per_length: 5, lengths: vec![100, 140], ..PasskeyOptions::default() };
        let c = passkey_suite(&m, &opts).unwrap();
        assert!(c.records.iter().all(|r| r.accuracy == 0.0));
        assert_eq!(c.records, passkey_suite(&m, &opts).unwrap().records);
    }

    #[test]
    fn greedy_generation_matches_uncached_argmax() {
        let m = tiny();
        let prompt = vec![BOS, 5, 9, 11];
        let out = greedy_generate(&m, &prompt, 6, |_| false).unwrap();
        let mut seq = prompt.clone();
        for &t in &out {
            let (logits, _) = m.forward(&seq, None).unwrap();
            assert_eq!(argmax(&logits[logits.len() - 259..]) as u32, t);
            seq.push(t);
        }
    }
}
