//! AdamW training with a warmup/decay schedule, gradient accumulation,
//! metrics logging and resumable checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Corpus;
use crate::error::{bail, CocaError, Result};
use crate::model::{param_specs, Model, ModelParams};

pub const METRICS_HEADER: &str = "step,lr,loss,tokens_per_sec,elapsed_s";
pub const THREADS_ENV: &str = "COCA_LAB_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the last one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            warmup_fraction: 0.01,
            lr_start: 1e-7,
            lr_peak: 1e-4,
            lr_final: 1e-5,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch_size: 16,
            grad_accum: 1,
            seq_len: 64,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Recipe of the 350M reference run: global batch 256 with two
    /// accumulated micro-batches, 512-token sequences.
    pub fn paper_scale(total_steps: usize, seed: u64) -> Self {
        Self { total_steps, batch_size: 128, grad_accum: 2, seq_len: 512, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            bail!(Config, "total_steps must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            bail!(Config, "warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction);
        }
        if !(self.lr_start >= 0.0
            && self.lr_start <= self.lr_peak
            && self.lr_final >= 0.0
            && self.lr_final <= self.lr_peak)
        {
            bail!(Config, "learning rates must satisfy 0 <= lr_start, lr_final <= lr_peak");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            bail!(Config, "adam_eps must be positive; weight_decay and grad_clip non-negative");
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.seq_len == 0 {
            bail!(Config, "batch_size, grad_accum and seq_len must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).ceil() as usize
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.grad_accum * self.seq_len
    }
}

/// Learning rate after `step` completed updates: linear warmup from
/// `lr_start` to `lr_peak`, then linear decay to `lr_final` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        bail!(Input, "step {step} is past total_steps {}", cfg.total_steps);
    }
    let warm = cfg.warmup_steps();
    // a * (1 - f) + b * f hits both endpoints exactly
    let lerp = |a: f64, b: f64, f: f64| a * (1.0 - f) + b * f;
    Ok(if step < warm {
        lerp(cfg.lr_start, cfg.lr_peak, step as f64 / warm as f64)
    } else {
        lerp(cfg.lr_peak, cfg.lr_final, (step - warm) as f64 / (cfg.total_steps - warm).max(1) as f64)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub t: u64,
    names: Vec<String>,
}

impl AdamState {
    pub fn new(model: &Model<f32>) -> Self {
        Self {
            m: ModelParams::zeros(&model.config),
            v: ModelParams::zeros(&model.config),
            t: 0,
            names: param_specs(&model.config).into_iter().map(|s| s.name).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
pub fn adamw_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let g_all = grads.tensors();
    for (g, name) in g_all.iter().zip(&state.names) {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            bail!(Numeric, "non-finite gradient at {name}[{i}]");
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let shrink = 1.0 - lr * cfg.weight_decay;
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(g_all).zip(ms).zip(vs) {
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            p[i] = (p[i] as f64 * shrink - lr * update) as f32;
        }
    }
    Ok(())
}

pub fn global_norm(grads: &ModelParams<f32>) -> f64 {
    grads.tensors().iter().flat_map(|t| t.iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Scales `grads` down to `max_norm` if their global norm exceeds it.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens_per_sec: f64,
    pub elapsed_s: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{:e},{:.6},{:.1},{:.3}", self.step, self.lr, self.loss, self.tokens_per_sec, self.elapsed_s)
    }
}

/// Run-level options that are not part of the optimisation recipe.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed steps (the schedule still spans
    /// `total_steps`). Used to interrupt a run on purpose.
    pub stop_after: Option<usize>,
    /// Worker threads; falls back to `COCA_LAB_THREADS`, then to rayon's default.
    pub threads: Option<usize>,
    /// Extra JSON stored in every checkpoint header.
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_done: usize,
    pub metrics: Vec<MetricRow>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Full trainer state; checkpoints capture all of it.
pub struct Trainer {
    pub model: Model<f32>,
    pub state: AdamState,
    pub cfg: TrainConfig,
    pub step: usize,
    rng: ChaCha8Rng,
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend(rng.get_stream().to_le_bytes());
    out.extend(rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_bytes(b: &[u8]) -> Result<ChaCha8Rng> {
    if b.len() != 32 + 8 + 16 {
        bail!(Format, "rng state has {} bytes, expected 56", b.len());
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().expect("32 bytes"));
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    Ok(rng)
}

pub fn thread_count(explicit: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = explicit {
        return Ok(Some(n.max(1)));
    }
    match std::env::var(THREADS_ENV) {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map(|n| Some(n.max(1)))
            .map_err(|_| CocaError::Config(format!("{THREADS_ENV}={s:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

pub fn thread_pool(explicit: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(explicit)? {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CocaError::Config(format!("thread pool: {e}")))
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.seq_len > model.config.max_seq {
            bail!(Config, "seq_len {} exceeds the model's max_seq {}", cfg.seq_len, model.config.max_seq);
        }
        let state = AdamState::new(&model);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { model, state, cfg, step: 0, rng })
    }

    pub fn checkpoint(&self, metadata: &serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.step as u64);
        ck.push_tree("optim.m.", &self.state.m);
        ck.push_tree("optim.v.", &self.state.v);
        ck.rng_state = rng_bytes(&self.rng);
        ck.metadata = serde_json::json!({
            "train": self.cfg,
            "adam_t": self.state.t,
            "run": metadata,
        });
        ck
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = ck.model()?;
        let mut t = Self::new(model, cfg)?;
        if let Some(stored) = ck.metadata.get("train") {
            let stored: TrainConfig = serde_json::from_value(stored.clone())?;
            if stored != t.cfg {
                bail!(State, "checkpoint was written with a different training config");
            }
        }
        if !ck.has_tree("optim.m.") {
            bail!(State, "checkpoint has no optimizer state");
        }
        t.state.m = ck.tree("optim.m.")?;
        t.state.v = ck.tree("optim.v.")?;
        t.state.t = ck.metadata.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(ck.step);
        t.step = ck.step as usize;
        t.rng = rng_from_bytes(&ck.rng_state)?;
        Ok(t)
    }

    /// Draws the next micro-batches and returns the mean loss and gradient.
    fn batch_grad(&mut self, corpus: &Corpus, pool: &rayon::ThreadPool) -> Result<(f64, ModelParams<f32>)> {
        let cfg = &self.cfg;
        let n = cfg.batch_size * cfg.grad_accum;
        let w = 1.0 / n as f64;
        let samples: Vec<(Vec<u32>, Vec<u32>)> = (0..n)
            .map(|_| {
                let (mut x, mut y) = corpus.sample(&mut self.rng);
                x.truncate(cfg.seq_len);
                y.truncate(cfg.seq_len);
                (x, y)
            })
            .collect();
        let model = &self.model;
        let mut grads = ModelParams::zeros(&model.config);
        let mut loss = 0.0;
        // Per-sample gradients are summed in sample order, so the result does
        // not depend on the number of threads. Chunks bound peak memory.
        let chunk = pool.current_num_threads().max(1) * 2;
        let mut scratch: Vec<ModelParams<f32>> = (0..chunk.min(n)).map(|_| ModelParams::zeros(&model.config)).collect();
        for part in samples.chunks(chunk) {
            let losses: Vec<Result<f64>> = pool.install(|| {
                part.par_iter()
                    .zip(scratch.par_iter_mut())
                    .map(|((x, y), g)| {
                        g.fill_zero();
                        model.loss_and_grad(x, y, w, g)
                    })
                    .collect()
            });
            for (l, g) in losses.into_iter().zip(&scratch) {
                loss += w * l?;
                grads.add_assign(g);
            }
        }
        Ok((loss, grads))
    }

    /// Runs one optimizer step. On a non-finite loss the parameters are left
    /// untouched and a numeric error is returned.
    pub fn step(&mut self, corpus: &Corpus, pool: &rayon::ThreadPool) -> Result<(f64, f64)> {
        if self.step >= self.cfg.total_steps {
            bail!(State, "training already finished at step {}", self.step);
        }
        let lr = lr_at(self.step, &self.cfg)?;
        let (loss, mut grads) = self.batch_grad(corpus, pool)?;
        if !loss.is_finite() {
            bail!(Numeric, "non-finite loss {loss} at step {}", self.step + 1);
        }
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        adamw_step(&mut self.model.params, &grads, &mut self.state, lr, &self.cfg)?;
        self.step += 1;
        Ok((lr, loss))
    }
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Trains until `total_steps` (or `opts.stop_after`), logging one metrics row
/// per step. When `out_dir` is set, metrics are appended to `metrics.csv` and
/// checkpoints are written every `checkpoint_every` steps and at the end.
pub fn train_loop(trainer: &mut Trainer, corpus: &Corpus, opts: &TrainOptions) -> Result<TrainSummary> {
    let cfg = trainer.cfg.clone();
    if corpus.window < cfg.seq_len + 1 {
        bail!(Config, "corpus windows of {} tokens cannot feed seq_len {}", corpus.window, cfg.seq_len);
    }
    let pool = thread_pool(opts.threads)?;
    let mut metrics_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let fresh = !path.exists() || fs::metadata(&path)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let end = opts.stop_after.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let started = Instant::now();
    let mut summary = TrainSummary { steps_done: 0, metrics: Vec::new(), last_checkpoint: None };
    while trainer.step < end {
        let t0 = Instant::now();
        let (lr, loss) = match trainer.step(corpus, &pool) {
            Ok(v) => v,
            Err(e @ CocaError::Numeric(_)) => {
                if let Some(dir) = &opts.out_dir {
                    trainer.checkpoint(&opts.metadata).save(&dir.join("diagnostic.ckpt"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let dt = t0.elapsed().as_secs_f64().max(1e-9);
        let row = MetricRow {
            step: trainer.step,
            lr,
            loss,
            tokens_per_sec: cfg.tokens_per_step() as f64 / dt,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", row.csv())?;
        }
        summary.metrics.push(row);
        summary.steps_done += 1;
        let periodic = cfg.checkpoint_every > 0 && trainer.step.is_multiple_of(cfg.checkpoint_every);
        if let Some(dir) = &opts.out_dir {
            if periodic || trainer.step == end {
                let path = checkpoint_path(dir, trainer.step);
                trainer.checkpoint(&opts.metadata).save(&path)?;
                summary.last_checkpoint = Some(path);
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::data::{synth_corpus, CorpusKind};
    use crate::model::{init_model, ModelConfig};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            total_steps: 4,
            batch_size: 2,
            seq_len: 16,
            lr_peak: 1e-2,
            lr_start: 1e-3,
            lr_final: 1e-3,
            warmup_fraction: 0.25,
            ..TrainConfig::default()
        }
    }

    fn tiny_model(variant: Variant) -> Model<f32> {
        let mut c = ModelConfig::tiny(variant, 5);
        c.vocab_size = crate::tokenizer::VOCAB_SIZE;
        c.max_seq = 32;
        init_model(&c).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig { total_steps: 1000, ..TrainConfig::default() };
        assert_eq!(cfg.warmup_steps(), 10);
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-7);
        assert_eq!(lr_at(10, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(1000, &cfg).unwrap(), 1e-5);
        assert!(lr_at(1001, &cfg).is_err());
        let mid = lr_at(505, &cfg).unwrap();
        assert!((mid - (1e-4 + 1e-5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_adam_matches_hand_rolled_oracle() {
        let mut c = ModelConfig::tiny(Variant::Baseline, 0);
        c.vocab_size = 2;
        let model = init_model::<f32>(&c).unwrap();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut params = model.params.clone();
        let mut grads = ModelParams::zeros(&c);
        grads.lnf_b[0] = 1.0;
        let mut st = AdamState::new(&model);
        let p0 = params.lnf_b[0] as f64;
        let (lr, b1, b2, eps) = (1e-3, 0.9f64, 0.95f64, 1e-8);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, p0);
        for t in 1..=5 {
            adamw_step(&mut params, &grads, &mut st, lr, &cfg).unwrap();
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            assert!((params.lnf_b[0] as f64 - p).abs() < 1e-7, "step {t}");
        }
        // constant unit gradient: every bias-corrected step has size ~lr
        assert!((p0 - p - 5.0 * lr).abs() < 1e-6);
        assert_eq!(params.lnf_b[1], model.params.lnf_b[1]);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let model = init_model::<f32>(&ModelConfig::tiny(Variant::Coca, 1)).unwrap();
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut params = model.params.clone();
        let grads = ModelParams::zeros(&model.config);
        let mut st = AdamState::new(&model);
        adamw_step(&mut params, &grads, &mut st, 0.01, &cfg).unwrap();
        let a = model.params.tensors()[2][3] as f64 * (1.0 - 0.01 * 0.1);
        assert!((params.tensors()[2][3] as f64 - a).abs() < 1e-7);

        let mut zero_wd = model.params.clone();
        let cfg0 = TrainConfig { weight_decay: 0.0, ..cfg };
        adamw_step(&mut zero_wd, &grads, &mut AdamState::new(&model), 0.01, &cfg0).unwrap();
        assert_eq!(zero_wd, model.params);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let model = init_model::<f32>(&ModelConfig::tiny(Variant::Coca, 1)).unwrap();
        let mut params = model.params.clone();
        let mut grads = ModelParams::zeros(&model.config);
        grads.layers[0].attn.w_t[4] = f32::NAN;
        let err =
            adamw_step(&mut params, &grads, &mut AdamState::new(&model), 0.1, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("layers.0.attn.w_t[4]"), "{err}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let model = tiny_model(Variant::Coca);
        let corpus = synth_corpus(CorpusKind::Copy, 17 * 20, 17, 0).unwrap();
        let cfg = TrainConfig { total_steps: 1, lr_start: 0.0, lr_peak: 0.0, lr_final: 0.0, ..small_cfg() };
        let mut t = Trainer::new(model.clone(), cfg).unwrap();
        train_loop(&mut t, &corpus, &TrainOptions::default()).unwrap();
        assert_eq!(t.model.params, model.params);
    }

    #[test]
    fn accumulation_matches_a_larger_batch() {
        let corpus = synth_corpus(CorpusKind::Keyvalue, 32 * 40, 32, 3).unwrap();
        let base = TrainConfig { total_steps: 1, seq_len: 31, ..small_cfg() };
        let mut a =
            Trainer::new(tiny_model(Variant::Coca), TrainConfig { batch_size: 2, grad_accum: 2, ..base.clone() })
                .unwrap();
        let mut b =
            Trainer::new(tiny_model(Variant::Coca), TrainConfig { batch_size: 4, grad_accum: 1, ..base }).unwrap();
        let opts = TrainOptions { threads: Some(1), ..TrainOptions::default() };
        train_loop(&mut a, &corpus, &opts).unwrap();
        train_loop(&mut b, &corpus, &opts).unwrap();
        for (x, y) in a.model.params.tensors().iter().zip(b.model.params.tensors()) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn resumed_run_is_byte_identical() {
        let corpus = synth_corpus(CorpusKind::Copy, 17 * 30, 17, 9).unwrap();
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { threads: Some(1), out_dir: Some(dir.path().join("full")), ..TrainOptions::default() };
        let mut full = Trainer::new(tiny_model(Variant::Coca), cfg.clone()).unwrap();
        train_loop(&mut full, &corpus, &opts).unwrap();

        let half_dir = dir.path().join("half");
        let mut first = Trainer::new(tiny_model(Variant::Coca), cfg.clone()).unwrap();
        let s = train_loop(
            &mut first,
            &corpus,
            &TrainOptions {
                stop_after: Some(2),
                out_dir: Some(half_dir.clone()),
                threads: Some(1),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let ck = Checkpoint::load(&s.last_checkpoint.unwrap()).unwrap();
        let mut second = Trainer::resume(&ck, cfg).unwrap();
        train_loop(
            &mut second,
            &corpus,
            &TrainOptions { out_dir: Some(half_dir.clone()), threads: Some(1), ..TrainOptions::default() },
        )
        .unwrap();
        let a = fs::read(dir.path().join("full/step-000004.ckpt")).unwrap();
        let b = fs::read(half_dir.join("step-000004.ckpt")).unwrap();
        assert_eq!(a, b);
        let rows = fs::read_to_string(half_dir.join("metrics.csv")).unwrap();
        assert_eq!(rows.lines().count(), 5);
    }

    #[test]
    fn thread_count_does_not_change_the_result() {
        let corpus = synth_corpus(CorpusKind::Copy, 17 * 30, 17, 2).unwrap();
        let run = |threads| {
            let mut t = Trainer::new(tiny_model(Variant::Baseline), small_cfg()).unwrap();
            train_loop(&mut t, &corpus, &TrainOptions { threads: Some(threads), ..TrainOptions::default() }).unwrap();
            t.model.params
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn seq_len_beyond_model_is_rejected() {
        let cfg = TrainConfig { seq_len: 33, ..small_cfg() };
        assert!(matches!(Trainer::new(tiny_model(Variant::Coca), cfg), Err(CocaError::Config(_))));
    }
}
