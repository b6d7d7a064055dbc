//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line to
//! stderr (outside the test harness capture) and then asserts.
//!
//! Criteria run one at a time so that the wall-clock limits are measured
//! without contention from each other.
//!
//! cargo test --release --test acceptance -- --test-threads 1

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use coca_lab::attention::coca_effective_keys;
use coca_lab::data::{synth_corpus, CorpusKind};
use coca_lab::diagnostics::{
    contraction_memory_probe, decay_bound_check_with, order_break_scan, DecayMode, DecayTables, DECAY_SLACK,
};
use coca_lab::evaluation::{
    gen_passkey_sample, passkey_suite, ppl_curve, score_passkey, PasskeyOptions, PasskeyTemplate,
    DEFAULT_PASSKEY_SAMPLES, DEFAULT_STRIDE, PAPER_FILLER, PAPER_PREAMBLE, PAPER_QUESTION, PASSKEY_MAX, PASSKEY_MIN,
    SCORED_TOKENS,
};
use coca_lab::gradcheck::{gradient_check, ModelObjective};
use coca_lab::rotary::DEFAULT_BASE;
use coca_lab::tokenizer::encode;
use coca_lab::training::{lr_at, train_loop, TrainConfig, TrainOptions, Trainer};
use coca_lab::{
    apply_rotation, coca_scores_fused, coca_scores_naive, fold_relu_t, init_model, HeadTensor, Model, ModelConfig,
    RotaryTable, ScoreTensor, Variant,
};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs one criterion, prints its verdict line and fails the test on FAIL.
/// `check` returns `(passed, detail)`.
fn criterion(n: u32, name: &str, limit: Duration, check: impl FnOnce() -> (bool, String)) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check));
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok((ok, detail)) => (ok, detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let in_time = elapsed <= limit;
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs());
    let line = format!("{verdict} criterion {n} ({name}): {detail}; {timing}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
    assert!(in_time, "criterion {n} exceeded its time limit: {timing}");
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn head(rng: &mut ChaCha8Rng, seq: usize, heads: usize, d: usize) -> HeadTensor<f64> {
    HeadTensor::from_vec(normals(rng, seq * heads * d), seq, heads, d).unwrap()
}

/// The same head vectors repeated at every one of `seq` positions.
fn repeated(v: &[f64], seq: usize) -> HeadTensor<f64> {
    HeadTensor::from_vec(v.repeat(seq), seq, 1, v.len()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    max_abs_diff(got, want) / want.iter().map(|x| x.abs()).fold(1e-300, f64::max)
}

#[test]
fn criterion_1_collinearity_invariant() {
    criterion(1, "collinear effective keys", Duration::from_secs(10), || {
        let (d, rows, chunks) = (64, 1000, 100);
        let half = d / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut worst, mut nonzero, mut zero) = (0.0f64, 0usize, 0usize);
        for _ in 0..chunks {
            let q = head(&mut rng, rows, 1, d);
            let t = fold_relu_t(&head(&mut rng, rows, 1, d)).unwrap();
            let k = coca_effective_keys(&q, &t).unwrap();
            for r in 0..rows {
                let (qv, kv) = (q.vector(r, 0), k.vector(r, 0));
                for j in 0..half {
                    let (kr, ki) = (kv[j], kv[j + half]);
                    if kr == 0.0 && ki == 0.0 {
                        zero += 1;
                        continue;
                    }
                    nonzero += 1;
                    let (qr, qi) = (qv[j], qv[j + half]);
                    let angle = (qr * ki - qi * kr).atan2(qr * kr + qi * ki);
                    worst = worst.max(angle.abs());
                }
            }
        }
        let ok = worst <= 1e-6 && nonzero > 0;
        (ok, format!("{} vectors, {nonzero} nonzero pairs ({zero} clamped), max angle {worst:.2e} rad", rows * chunks))
    });
}

#[test]
fn criterion_2_max_at_zero_distance() {
    criterion(2, "max at zero distance", Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = 513;
        let mut worst = f64::NEG_INFINITY;
        let mut cases = 0;
        for d in [2, 8, 16, 32, 64] {
            let table = RotaryTable::new(d, DEFAULT_BASE, seq).unwrap();
            for _ in 0..8 {
                let q = repeated(&normals(&mut rng, d), seq);
                let t = fold_relu_t(&repeated(&normals(&mut rng, d), seq)).unwrap();
                let q_rot = apply_rotation(&q, &table, 0).unwrap();
                let t_rot = apply_rotation(t.values(), &table, 0).unwrap();
                let s = coca_scores_fused(&q, &q_rot, &t_rot, (d as f64).sqrt()).unwrap();
                for m in 0..seq {
                    let row = s.row(0, m);
                    for n in 0..=m {
                        // positive means a(m, n) exceeds a(m, m)
                        worst = worst.max(row[n] - row[m]);
                    }
                }
                cases += 1;
            }
        }
        let coca_ok = worst <= 1e-6;

        // baseline: one component of q leads k by theta0 = 0.5
        let theta0: f64 = 0.5;
        let inject = |d: usize, j: usize| {
            let half = d / 2;
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            k[j] = 1.0;
            q[j] = theta0.cos();
            q[j + half] = theta0.sin();
            (q, k)
        };
        // theta_j in {1, 0.1, 0.01, 0.001}: theta0 / theta_j is an integer or below 1
        let small = RotaryTable::new(8, DEFAULT_BASE, 1).unwrap();
        let mut floor_ok = true;
        let mut example = 0;
        for j in 0..4 {
            let (q, k) = inject(8, j);
            let c = &order_break_scan(&q, &k, &small, 512).unwrap().components[j];
            let want = (theta0 / c.theta_j).floor() as usize;
            floor_ok &= c.measured == want;
            if j == 2 {
                example = c.measured;
            }
        }
        // head_dim 64: argmax is the integer nearest theta0 / theta_j
        let big = RotaryTable::new(64, DEFAULT_BASE, 1).unwrap();
        let (mut nearest_ok, mut checked, mut floor_differs) = (true, 0, 0);
        for j in 0..32 {
            let theta = big.freqs()[j];
            if theta0 / theta > 511.0 {
                continue;
            }
            let (q, k) = inject(64, j);
            let c = &order_break_scan(&q, &k, &big, 512).unwrap().components[j];
            let ratio = theta0 / theta;
            let nearest = (ratio - 0.5).ceil().max(0.0) as usize;
            nearest_ok &= c.measured == nearest;
            floor_differs += usize::from(c.measured != ratio.floor() as usize);
            checked += 1;
        }
        let ok = coca_ok && floor_ok && example == 50 && nearest_ok;
        (
            ok,
            format!(
                "coca: {cases} inputs, max a(m,n)-a(m,m) {worst:.2e}; baseline theta_j=0.01 argmax {example}, \
                 floor law on integer ratios {floor_ok}, nearest-integer law on {checked} head_dim-64 components \
                 {nearest_ok} ({floor_differs} of them differ from the floor)"
            ),
        )
    });
}

/// `sum_j t_j |q_j|^2 cos((m - n) theta_j)` by complex arithmetic.
fn oracle_scores(
    q: &HeadTensor<f64>,
    t: &HeadTensor<f64>,
    table: &RotaryTable,
    q_off: usize,
    scale: f64,
) -> ScoreTensor<f64> {
    let (heads, sq, sk, d) = (q.heads, q.seq, t.seq, q.head_dim);
    let half = d / 2;
    let mut out = ScoreTensor::zeros(heads, sq, sk);
    for h in 0..heads {
        for m in 0..sq {
            for n in 0..sk {
                let (qv, tv) = (q.vector(m, h), t.vector(n, h));
                let mut acc = 0.0;
                for j in 0..half {
                    let theta = table.freqs()[j];
                    let qj = Complex64::new(qv[j], qv[j + half]);
                    let q_rot = qj * Complex64::from_polar(1.0, (q_off + m) as f64 * theta);
                    let key = qj * tv[j] * Complex64::from_polar(1.0, n as f64 * theta);
                    acc += (q_rot * key.conj()).re;
                }
                out.data[(h * sq + m) * sk + n] = acc / scale;
            }
        }
    }
    out
}

#[test]
fn criterion_3_fused_naive_equivalence() {
    criterion(3, "fused contraction", Duration::from_secs(60), || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut vs_naive, mut vs_naive_f32, mut vs_oracle) = (0.0f64, 0.0f64, 0.0f64);
        let mut shapes = 0;
        for heads in [1, 2, 4] {
            for sq in [1, 3, 16] {
                for sk in [1, 3, 16] {
                    for d in [2, 8, 16] {
                        let table = RotaryTable::new(d, DEFAULT_BASE, 64).unwrap();
                        let q_off = 7;
                        let q = head(&mut rng, sq, heads, d);
                        let t = fold_relu_t(&head(&mut rng, sk, heads, d)).unwrap();
                        let q_rot = apply_rotation(&q, &table, q_off).unwrap();
                        let t_rot = apply_rotation(t.values(), &table, 0).unwrap();
                        let scale = (d as f64).sqrt();
                        let fused = coca_scores_fused(&q, &q_rot, &t_rot, scale).unwrap();
                        let naive = coca_scores_naive(&q, &q_rot, &t_rot, scale).unwrap();
                        let fused32 = coca_scores_fused(&q.cast::<f32>(), &q_rot.cast(), &t_rot.cast(), scale).unwrap();
                        let fused32: Vec<f64> = fused32.data.iter().map(|&x| f64::from(x)).collect();
                        let oracle = oracle_scores(&q, t.values(), &table, q_off, scale);
                        vs_naive = vs_naive.max(rel_err(&fused.data, &naive.data));
                        vs_naive_f32 = vs_naive_f32.max(rel_err(&fused32, &naive.data));
                        vs_oracle = vs_oracle.max(rel_err(&fused.data, &oracle.data));
                        shapes += 1;
                    }
                }
            }
        }
        let ok = vs_naive < 1e-5 && vs_naive_f32 < 1e-5 && vs_oracle < 1e-9;
        (
            ok,
            format!(
                "{shapes} shapes, rel err vs naive {vs_naive:.1e} (f32 fused {vs_naive_f32:.1e}), \
                 vs complex triple loop {vs_oracle:.1e}"
            ),
        )
    });
}

#[test]
fn criterion_4_decay_bounds() {
    criterion(4, "decay bounds", Duration::from_secs(120), || {
        let d = 64;
        let table = RotaryTable::new(d, DEFAULT_BASE, 1).unwrap();
        let tables = DecayTables::new(&table, (1..=4096).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut violations, mut coeff, mut tightest, mut closed) = (0, 0, 0.0f64, 0.0f64);
        let n = 10_000;
        for _ in 0..n {
            let q = normals(&mut rng, d);
            let t_raw = HeadTensor::from_vec(normals(&mut rng, d), 1, 1, d).unwrap();
            let t = fold_relu_t(&t_raw).unwrap().into_inner().data[..d / 2].to_vec();
            let r = decay_bound_check_with(&tables, &q, &t, DecayMode::Coca).unwrap();
            violations += r.violations;
            coeff += r.coefficient_violations;
            closed = closed.max(r.closed_form_max_err.unwrap_or(f64::INFINITY));
            for p in &r.points {
                if p.rhs_strong > 0.0 {
                    tightest = tightest.max(p.lhs / p.rhs_strong);
                }
            }
        }
        let ok = violations == 0 && coeff == 0 && closed < 1e-9;
        (
            ok,
            format!(
                "{n} inputs x 4096 distances, {violations} bound violations, {coeff} coefficient violations \
                 (slack {DECAY_SLACK:.0e}), max |a|/bound {tightest:.3}, closed form err {closed:.1e}"
            ),
        )
    });
}

#[test]
fn criterion_5_gradient_check() {
    criterion(5, "gradient check", Duration::from_secs(120), || {
        let mut cfg = ModelConfig::tiny(Variant::Coca, 5);
        cfg.n_layers = 1;
        let model = init_model::<f64>(&cfg).unwrap();
        let batch = vec![
            (vec![1, 4, 4, 9, 2, 7, 3, 0, 10, 5], vec![4, 4, 9, 2, 7, 3, 0, 10, 5, 6]),
            (vec![8, 2, 2, 2, 6, 1], vec![2, 2, 2, 6, 1, 9]),
        ];
        let mut obj = ModelObjective { model, batch };
        let r = gradient_check(&mut obj, 1e-5, 24, 5).unwrap();
        let w_t = r.per_tensor_max.iter().find(|(n, _)| n.ends_with("w_t")).map(|(_, e)| *e);
        let ok = r.coords_checked >= 200 && w_t.is_some() && r.max_rel_err < 1e-5;
        (
            ok,
            format!(
                "{} coords, max rel err {:.2e} at {}, w_t max {:.2e}",
                r.coords_checked,
                r.max_rel_err,
                r.worst_parameter,
                w_t.unwrap_or(f64::NAN)
            ),
        )
    });
}

fn cached_vs_batch(model: &Model<f32>, tokens: &[u32]) -> f64 {
    let v = model.config.vocab_size;
    let (batch, _) = model.forward(tokens, None).unwrap();
    let mut caches = model.empty_caches();
    let mut worst = 0.0f64;
    for (i, &t) in tokens.iter().enumerate() {
        let (logits, next) = model.forward(&[t], Some(&caches)).unwrap();
        caches = next;
        for (a, b) in logits.iter().zip(&batch[i * v..(i + 1) * v]) {
            worst = worst.max(f64::from((a - b).abs()));
        }
    }
    worst
}

#[test]
fn criterion_6_incremental_decoding() {
    criterion(6, "incremental decoding", Duration::from_secs(60), || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens: Vec<u32> = (0..64).map(|_| rng.random_range(0..256)).collect();
        let mut parts = Vec::new();
        let mut ok = true;
        for variant in [Variant::Coca, Variant::Baseline] {
            let model = init_model::<f32>(&ModelConfig::desk(variant, 6)).unwrap();
            let diff = cached_vs_batch(&model, &tokens);
            ok &= diff <= 1e-4;
            parts.push(format!("{variant} max diff {diff:.2e}"));
        }
        (ok, format!("64 tokens, {}", parts.join(", ")))
    });
}

#[test]
fn criterion_7_memory_claim() {
    criterion(7, "contraction memory", Duration::from_secs(60), || {
        let p = contraction_memory_probe(64, 64, 4, 64).unwrap();
        let ok = p.ratio() >= 16.0 && p.max_abs_diff < 1e-9;
        (
            ok,
            format!(
                "d=64: naive peak {} elems vs fused {} elems, ratio {:.1}",
                p.naive_peak_elems,
                p.fused_peak_elems,
                p.ratio()
            ),
        )
    });
}

/// Desk extrapolation budget, pinned after the reference run.
const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_STEPS: usize = 6000;
const DESK_LR_PEAK: f64 = 3e-3;
const DESK_TRAIN_LEN: usize = 64;
const DESK_CORPUS_WINDOWS: usize = 20_000;

struct DeskResult {
    passkey: f64,
    ppl_in: f64,
    ppl_long: f64,
}

fn desk_run(variant: Variant, seed: u64) -> DeskResult {
    let model = init_model::<f32>(&ModelConfig::desk(variant, seed)).unwrap();
    let window = DESK_TRAIN_LEN + 1;
    let corpus = synth_corpus(CorpusKind::Keyvalue, window * DESK_CORPUS_WINDOWS, window, 100 + seed).unwrap();
    let cfg = TrainConfig {
        total_steps: DESK_STEPS,
        warmup_fraction: 0.05,
        lr_peak: DESK_LR_PEAK,
        lr_final: DESK_LR_PEAK / 10.0,
        seq_len: DESK_TRAIN_LEN,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    train_loop(&mut trainer, &corpus, &TrainOptions::default()).unwrap();
    let model = trainer.model;

    let opts = PasskeyOptions {
        lengths: vec![4 * DESK_TRAIN_LEN],
        n_per_length: DEFAULT_PASSKEY_SAMPLES,
        ntk_kappa: 4.0,
        template: PasskeyTemplate::Compact,
        seed: 1000 + seed,
    };
    let passkey = passkey_suite(&model, &opts).unwrap().records[0].accuracy;
    let docs = coca_lab::cli::heldout_docs(2000 + seed, 8, 8 * DESK_TRAIN_LEN * 2 + 1).unwrap();
    let curve = ppl_curve(&model, &docs, &[DESK_TRAIN_LEN, 8 * DESK_TRAIN_LEN], DEFAULT_STRIDE, 1.0).unwrap();
    DeskResult { passkey, ppl_in: curve.records[0].ppl, ppl_long: curve.records[1].ppl }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_8_desk_extrapolation() {
    criterion(8, "desk extrapolation", Duration::from_secs(3 * 3600), || {
        let mut per_variant = Vec::new();
        for variant in [Variant::Coca, Variant::Baseline] {
            let runs: Vec<DeskResult> = DESK_SEEDS.iter().map(|&s| desk_run(variant, s)).collect();
            for (s, r) in DESK_SEEDS.iter().zip(&runs) {
                let line = format!(
                    "  criterion 8 {variant} seed {s}: passkey@{} {:.2}, ppl {:.2} -> {:.2}\n",
                    4 * DESK_TRAIN_LEN,
                    r.passkey,
                    r.ppl_in,
                    r.ppl_long
                );
                let _ = std::io::stderr().write_all(line.as_bytes());
            }
            let acc = median(runs.iter().map(|r| r.passkey).collect());
            let ratio = median(runs.iter().map(|r| r.ppl_long / r.ppl_in).collect());
            per_variant.push((acc, ratio));
        }
        let ((coca_acc, coca_ratio), (base_acc, base_ratio)) = (per_variant[0], per_variant[1]);
        let passkey_ok = coca_acc - base_acc >= 0.20;
        let ppl_ok = coca_ratio <= 2.0 && base_ratio >= 4.0;
        (
            passkey_ok && ppl_ok,
            format!(
                "median passkey@4x (kappa 4) coca {coca_acc:.2} vs baseline {base_acc:.2} (need +0.20: {passkey_ok}); \
                 median ppl 8x/1x coca {coca_ratio:.2} (need <= 2) vs baseline {base_ratio:.2} (need >= 4): {ppl_ok}"
            ),
        )
    });
}

#[test]
fn criterion_9_protocol_fidelity() {
    criterion(9, "protocol constants", Duration::from_secs(10), || {
        let mut failures = Vec::new();
        let mut expect = |cond: bool, what: &str| {
            if !cond {
                failures.push(what.to_string());
            }
        };
        expect(DEFAULT_STRIDE == 256, "stride");
        expect(PASSKEY_MIN == 10_000 && PASSKEY_MAX == 99_999, "passkey range");
        expect(DEFAULT_PASSKEY_SAMPLES == 100, "samples per length");
        expect(SCORED_TOKENS == 64, "scored tokens");
        expect(
            PAPER_PREAMBLE
                == "There is an important info hidden inside a lot of irrelevant text. Find it and memorize them. \
                    I will quiz you about the important information there.\n",
            "preamble",
        );
        expect(
            PAPER_FILLER
                == "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again.\n",
            "filler",
        );
        expect(PAPER_QUESTION == "What is the pass key?", "question");

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut keys = Vec::new();
        for _ in 0..200 {
            let s = gen_passkey_sample(600, PasskeyTemplate::Paper, &mut rng).unwrap();
            let text = s.text();
            let key = s.passkey.to_string();
            keys.push(s.passkey);
            expect(text.starts_with(PAPER_PREAMBLE) && text.ends_with(PAPER_QUESTION), "template order");
            expect(text.matches(key.as_str()).count() == 2, "passkey appears twice");
            expect(
                text.contains(&format!("The pass key is {key}. Remember it. {key} is the pass key.\n")),
                "passkey sentence",
            );
            expect(s.prompt_tokens.len() >= 600, "target length");
        }
        expect(keys.iter().all(|k| (PASSKEY_MIN..=PASSKEY_MAX).contains(k)), "sampled range");

        let mut gen = encode("x").repeat(SCORED_TOKENS - 5);
        gen.extend(encode("22841"));
        expect(score_passkey(&gen, 22841), "key inside the first 64 tokens");
        gen.insert(0, encode("x")[0]);
        expect(!score_passkey(&gen, 22841), "key beyond the first 64 tokens");
        expect(!score_passkey(&encode("228.The grass is green."), 22841), "truncated key");

        let cfg = TrainConfig { total_steps: 1000, ..TrainConfig::default() };
        expect(cfg.beta1 == 0.9 && cfg.beta2 == 0.95, "betas");
        expect(cfg.warmup_fraction == 0.01, "warmup fraction");
        let warm = cfg.warmup_steps();
        expect(lr_at(0, &cfg).unwrap() == 1e-7, "lr start");
        expect(lr_at(warm, &cfg).unwrap() == 1e-4, "lr peak");
        expect(lr_at(cfg.total_steps, &cfg).unwrap() == 1e-5, "lr final");
        let ok = failures.is_empty();
        (ok, if ok { "all constants match".into() } else { format!("mismatched: {}", failures.join(", ")) })
    });
}
