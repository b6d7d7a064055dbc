//! Command-line front end. The `coca-lab` binary only calls [`main`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::{coca_scores_fused, coca_scores_naive, fold_relu_t, Variant};
use crate::checkpoint::Checkpoint;
use crate::config::{Manifest, RunConfig};
use crate::data::{synth_corpus, CorpusKind};
use crate::diagnostics::{
    decay_bound_check_with, initial_angles, order_break_scan, random_score_inputs, rotary_border_report, DecayMode,
    DecayTables,
};
use crate::error::{bail, CocaError, Result};
use crate::evaluation::{passkey_suite, ppl_curve, PasskeyOptions, PasskeyTemplate};
use crate::model::{init_model, Model};
use crate::real::matmul;
use crate::rotary::RotaryTable;
use crate::tensor::HeadTensor;
use crate::training::{train_loop, TrainOptions, Trainer};
use crate::workspace;

#[derive(Debug, Parser)]
#[command(name = "coca-lab", version, about = "Train, evaluate and probe CoCA and RoPE attention")]
pub struct Cli {
    /// JSON run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed; overrides the config's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a synthetic corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Numerical diagnostics of the position encoding.
    Diagnose(DiagnoseArgs),
    /// Kernel benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Inspect artifacts.
    #[command(subcommand)]
    Inspect(InspectCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many steps (the schedule still spans total_steps).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Sliding-window perplexity on held-out lm_mix documents.
    Ppl(PplArgs),
    /// Passkey retrieval accuracy per prompt length.
    Passkey(PasskeyArgs),
}

#[derive(Debug, Args)]
pub struct PplArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated context sizes.
    #[arg(long, value_delimiter = ',')]
    pub contexts: Option<Vec<usize>>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub ntk_kappa: Option<f64>,
    #[arg(long)]
    pub docs: Option<usize>,
    #[arg(long)]
    pub doc_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PasskeyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated prompt lengths.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Samples per length.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub ntk_kappa: Option<f64>,
    #[arg(long, value_enum)]
    pub template: Option<TemplateArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TemplateArg {
    Paper,
    Compact,
}

impl From<TemplateArg> for PasskeyTemplate {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::Paper => PasskeyTemplate::Paper,
            TemplateArg::Compact => PasskeyTemplate::Compact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiagnoseKind {
    Order,
    Decay,
    Borders,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Coca,
    Baseline,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(value_enum)]
    pub kind: DiagnoseKind,
    /// Use collinear (CoCA) query/key pairs.
    #[arg(long)]
    pub coca: bool,
    /// Decay bound mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Take q and k from a trained model instead of random draws.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long)]
    pub s_max: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub theta0: Option<f64>,
    /// Number of random (q, k) draws for `decay`.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Fused versus naive score contraction.
    Contraction(ContractionArgs),
}

#[derive(Debug, Args)]
pub struct ContractionArgs {
    #[arg(long, default_value_t = 128)]
    pub sq: usize,
    #[arg(long, default_value_t = 128)]
    pub sk: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Refuse shapes whose naive path would need more than this many bytes.
    #[arg(long, default_value_t = 1 << 30)]
    pub max_bytes: usize,
}

#[derive(Debug, Subcommand)]
pub enum InspectCommand {
    /// Print a checkpoint's header and tensor manifest.
    Checkpoint { path: PathBuf },
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(cli: &Cli, seed_required: bool) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CocaError::Config(format!("cannot read {}: {e}", path.display())))?;
            // a CLI seed satisfies the mandatory field; otherwise parse the
            // file as written so errors keep their line numbers
            let text = match cli.seed {
                Some(seed) => {
                    let mut raw: serde_json::Value = serde_json::from_str(&text)
                        .map_err(|e| CocaError::Config(format!("{}: invalid JSON: {e}", path.display())))?;
                    if let Some(obj) = raw.as_object_mut() {
                        obj.insert("seed".into(), seed.into());
                    }
                    serde_json::to_string(&raw)?
                }
                None => text,
            };
            RunConfig::from_json(&text).map_err(|e| match e {
                CocaError::Config(m) => CocaError::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        }
        None => match cli.seed {
            Some(seed) => RunConfig::from_json(&format!("{{\"seed\": {seed}}}"))?,
            None if seed_required => bail!(Config, "missing field `seed`: pass --seed or a config with a seed"),
            None => RunConfig::from_json("{\"seed\": 0}")?,
        },
    };
    Ok(cfg)
}

fn prepare_out(cli: &Cli, default: &str, allow_existing: bool) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default));
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() && !cli.force && !allow_existing {
        bail!(State, "output directory {} is not empty; pass --force to write into it", dir.display());
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(EvalCommand::Ppl(a)) => cmd_eval_ppl(cli, a),
        Command::Eval(EvalCommand::Passkey(a)) => cmd_eval_passkey(cli, a),
        Command::Diagnose(a) => cmd_diagnose(cli, a),
        Command::Bench(BenchCommand::Contraction(a)) => cmd_bench(cli, a),
        Command::Inspect(InspectCommand::Checkpoint { path }) => cmd_inspect(path),
    }
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(cli, true)?;
    let out = prepare_out(cli, "train", a.resume.is_some())?;
    let model_cfg = cfg.model_config()?;
    let corpus = synth_corpus(cfg.data.kind, cfg.data.tokens, cfg.train.seq_len + 1, cfg.data_seed())?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(&Checkpoint::load(path)?, cfg.train.clone())?,
        None => Trainer::new(init_model(&model_cfg)?, cfg.train.clone())?,
    };
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        stop_after: a.stop_after,
        threads: None,
        metadata: serde_json::json!({ "config_hash": cfg.hash() }),
    };
    write_json(&out.join("config.json"), &cfg)?;
    let summary = train_loop(&mut trainer, &corpus, &opts)?;
    let mut m = Manifest::new("train", cfg.hash(), cfg.seed);
    m.outputs = vec!["config.json".into(), "metrics.csv".into()];
    if let Some(p) = &summary.last_checkpoint {
        m.outputs.push(p.file_name().expect("file name").to_string_lossy().into_owned());
    }
    m.details = serde_json::json!({
        "steps": trainer.step,
        "variant": model_cfg.variant,
        "final_loss": summary.metrics.last().map(|r| r.loss),
    });
    m.write(&out)?;
    println!(
        "trained {} to step {} (loss {:.4}); outputs in {}",
        model_cfg.variant,
        trainer.step,
        summary.metrics.last().map_or(f64::NAN, |r| r.loss),
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Checkpoint::load(path)?.model()
}

fn cmd_eval_ppl(cli: &Cli, a: &PplArgs) -> Result<()> {
    let mut cfg = resolve_config(cli, false)?;
    if let Some(c) = &a.contexts {
        cfg.eval.ppl_contexts = c.clone();
    }
    cfg.eval.stride = a.stride.unwrap_or(cfg.eval.stride);
    cfg.eval.ntk_kappa = a.ntk_kappa.unwrap_or(cfg.eval.ntk_kappa);
    cfg.eval.ppl_docs = a.docs.unwrap_or(cfg.eval.ppl_docs);
    cfg.eval.ppl_doc_tokens = a.doc_tokens.unwrap_or(cfg.eval.ppl_doc_tokens);
    let model = load_model(&a.checkpoint)?;
    let out = prepare_out(cli, "eval-ppl", false)?;
    let docs = heldout_docs(cfg.eval_seed(), cfg.eval.ppl_docs, cfg.eval.ppl_doc_tokens)?;
    let curve = ppl_curve(&model, &docs, &cfg.eval.ppl_contexts, cfg.eval.stride, cfg.eval.ntk_kappa)?;
    fs::write(out.join("ppl.csv"), curve.to_csv())?;
    let mut m = Manifest::new("eval ppl", cfg.hash(), cfg.seed);
    m.ntk_kappa = Some(cfg.eval.ntk_kappa);
    m.outputs = vec!["ppl.csv".into()];
    m.details = serde_json::json!({ "checkpoint": a.checkpoint, "variant": curve.variant, "stride": curve.stride });
    m.write(&out)?;
    print!("{}", curve.to_csv());
    Ok(())
}

/// Held-out lm_mix documents; each one comes from its own corpus seed.
pub fn heldout_docs(seed: u64, n: usize, tokens: usize) -> Result<Vec<Vec<u32>>> {
    (0..n as u64).map(|i| synth_corpus(CorpusKind::LmMix, tokens, 2, seed.wrapping_add(i)).map(|c| c.tokens)).collect()
}

fn cmd_eval_passkey(cli: &Cli, a: &PasskeyArgs) -> Result<()> {
    let mut cfg = resolve_config(cli, false)?;
    if let Some(l) = &a.lengths {
        cfg.eval.passkey_lengths = l.clone();
    }
    cfg.eval.passkey_n = a.n.unwrap_or(cfg.eval.passkey_n);
    cfg.eval.ntk_kappa = a.ntk_kappa.unwrap_or(cfg.eval.ntk_kappa);
    if let Some(t) = a.template {
        cfg.eval.passkey_template = t.into();
    }
    let model = load_model(&a.checkpoint)?;
    let out = prepare_out(cli, "eval-passkey", false)?;
    let curve = passkey_suite(
        &model,
        &PasskeyOptions {
            lengths: cfg.eval.passkey_lengths.clone(),
            n_per_length: cfg.eval.passkey_n,
            ntk_kappa: cfg.eval.ntk_kappa,
            template: cfg.eval.passkey_template,
            seed: cfg.eval_seed(),
        },
    )?;
    fs::write(out.join("passkey.csv"), curve.to_csv())?;
    let mut m = Manifest::new("eval passkey", cfg.hash(), cfg.seed);
    m.ntk_kappa = Some(cfg.eval.ntk_kappa);
    m.outputs = vec!["passkey.csv".into()];
    m.details = serde_json::json!({ "checkpoint": a.checkpoint, "variant": curve.variant, "template": curve.template });
    m.write(&out)?;
    print!("{}", curve.to_csv());
    Ok(())
}

/// Query and key (or folded coefficients) of one head at the last two
/// positions of a held-out prompt.
fn vectors_from_checkpoint(path: &Path, layer: usize, head: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>, Variant)> {
    let model = load_model(path)?.cast::<f64>();
    let c = &model.config;
    if head >= c.n_heads {
        bail!(Range, "head {head} does not exist (model has {})", c.n_heads);
    }
    let doc = &heldout_docs(seed, 1, c.max_seq)?[0];
    let a = model.attention_input(doc, layer)?;
    let (seq, d, hd) = (doc.len(), c.d_model, c.head_dim());
    let attn = &model.params.layers[layer].attn;
    let project = |w: &[f64]| {
        let mut y = vec![0.0; seq * d];
        matmul(&a, w, &mut y, seq, d, d, false);
        y
    };
    let q = project(&attn.w_q);
    let k = project(&attn.w_t);
    let row = |x: &[f64], p: usize| x[p * d + head * hd..p * d + (head + 1) * hd].to_vec();
    Ok((row(&q, seq - 1), row(&k, seq - 2), c.variant))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn fold(t_raw: &[f64]) -> Result<Vec<f64>> {
    let d = t_raw.len();
    let folded = fold_relu_t(&HeadTensor::from_vec(t_raw.to_vec(), 1, 1, d)?)?;
    Ok(folded.values().vector(0, 0)[..d / 2].to_vec())
}

fn cmd_diagnose(cli: &Cli, a: &DiagnoseArgs) -> Result<()> {
    let cfg = resolve_config(cli, false)?;
    let out = prepare_out(cli, "diagnose", false)?;
    let dc = &cfg.diagnostics;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.diag_seed());
    let coca = a.coca || a.mode == Some(ModeArg::Coca);
    // q, raw key projection; the key is q * folded t in coca mode
    let (q, k_raw, coca) = match &a.checkpoint {
        Some(p) => {
            let (q, k, v) = vectors_from_checkpoint(p, a.layer, a.head, cfg.eval_seed())?;
            (q, k, coca || v == Variant::Coca)
        }
        None => (random_vector(&mut rng, dc.head_dim), random_vector(&mut rng, dc.head_dim), coca),
    };
    let d = q.len();
    let table = RotaryTable::new(d, dc.rope_base, 1)?;
    let key_of = |q: &[f64], k_raw: &[f64]| -> Result<Vec<f64>> {
        if coca {
            let t = fold(k_raw)?;
            Ok((0..q.len()).map(|i| q[i] * t[i % (q.len() / 2)]).collect())
        } else {
            Ok(k_raw.to_vec())
        }
    };
    let mut m = Manifest::new(&format!("diagnose {:?}", a.kind).to_lowercase(), cfg.hash(), cfg.seed);
    match a.kind {
        DiagnoseKind::Order => {
            let k = key_of(&q, &k_raw)?;
            let r = order_break_scan(&q, &k, &table, a.s_max.unwrap_or(dc.s_max))?;
            fs::write(out.join("order.csv"), r.to_csv())?;
            write_json(&out.join("order.json"), &r)?;
            let nonzero = r.components.iter().filter(|c| c.measured > 0).count();
            println!(
                "components: {}  with order breaks: {nonzero}  total break length: {}",
                r.components.len(),
                r.total_measured()
            );
            m.outputs = vec!["order.csv".into(), "order.json".into()];
        }
        DiagnoseKind::Decay => {
            let mode = match a.mode {
                Some(ModeArg::Baseline) => DecayMode::Baseline,
                Some(ModeArg::Coca) => DecayMode::Coca,
                None if coca => DecayMode::Coca,
                None => DecayMode::Baseline,
            };
            let s_max = a.s_max.unwrap_or(dc.decay_s_max);
            let tables = DecayTables::new(&table, (1..=s_max).collect());
            let draws = if a.checkpoint.is_some() { 1 } else { a.samples.max(1) };
            let (mut violations, mut coeff, mut worst_closed) = (0usize, 0usize, 0.0f64);
            let mut first = None;
            for i in 0..draws {
                let (qi, ki) = if i == 0 {
                    (q.clone(), k_raw.clone())
                } else {
                    (random_vector(&mut rng, d), random_vector(&mut rng, d))
                };
                let kt = if mode == DecayMode::Coca { fold(&ki)? } else { ki };
                let r = decay_bound_check_with(&tables, &qi, &kt, mode)?;
                violations += r.violations;
                coeff += r.coefficient_violations;
                worst_closed = worst_closed.max(r.closed_form_max_err.unwrap_or(0.0));
                if first.is_none() {
                    first = Some(r);
                }
            }
            let r = first.expect("at least one draw");
            fs::write(out.join("decay.csv"), r.to_csv())?;
            write_json(&out.join("decay.json"), &r)?;
            println!("mode: {mode:?}  inputs: {draws}  distances: 1..={s_max}");
            println!("violations: {violations}");
            println!("coefficient violations: {coeff}");
            if mode == DecayMode::Coca {
                println!("closed form max error: {worst_closed:.3e}");
            }
            m.outputs = vec!["decay.csv".into(), "decay.json".into()];
            m.details =
                serde_json::json!({ "violations": violations, "coefficient_violations": coeff, "inputs": draws });
        }
        DiagnoseKind::Borders => {
            let theta0 = match a.theta0 {
                Some(t) => t,
                None if a.checkpoint.is_some() => {
                    let k = key_of(&q, &k_raw)?;
                    initial_angles(&q, &k)?.into_iter().flatten().next().unwrap_or(0.0)
                }
                None if coca => 0.0,
                None => dc.theta0,
            };
            let r = rotary_border_report(theta0, &table, a.s_max.unwrap_or(dc.s_max))?;
            write_json(&out.join("borders.json"), &r)?;
            let mut csv = String::from("j,theta_j,border,s_exact,s_index\n");
            for c in &r {
                for e in &c.predicted {
                    csv.push_str(&format!("{},{:.9e},{:?},{:.6},{}\n", c.j, c.theta_j, e.border, e.s_exact, e.s_index));
                }
            }
            fs::write(out.join("borders.csv"), csv)?;
            let agree = r.iter().filter(|c| c.agree).count();
            println!("theta0: {theta0:.6}  components agreeing with the scan: {agree}/{}", r.len());
            if agree != r.len() {
                bail!(Numeric, "border predictions disagree with the scan");
            }
            m.outputs = vec!["borders.csv".into(), "borders.json".into()];
        }
    }
    m.write(&out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    path: &'static str,
    mean_ms: f64,
    peak_elems: usize,
}

fn cmd_bench(cli: &Cli, a: &ContractionArgs) -> Result<()> {
    if a.reps == 0 {
        bail!(Input, "reps must be at least 1");
    }
    if a.sq == 0 || a.sk == 0 || a.heads == 0 || a.d == 0 || !a.d.is_multiple_of(2) {
        bail!(Input, "shape must be positive with an even d");
    }
    let naive_elems = a.heads.checked_mul(a.sq).and_then(|x| x.checked_mul(a.sk)).and_then(|x| x.checked_mul(a.d + 1));
    let naive_bytes = naive_elems.and_then(|x| x.checked_mul(8));
    match naive_bytes {
        Some(b) if b <= a.max_bytes => {}
        _ => bail!(
            Range,
            "naive path would need about {} bytes (limit {}); shrink the shape or raise --max-bytes",
            naive_bytes.map_or("more than usize::MAX".to_string(), |b| b.to_string()),
            a.max_bytes
        ),
    }
    let cfg = resolve_config(cli, false)?;
    let out = prepare_out(cli, "bench", false)?;
    let (q_raw, q_rot, t_rot) = random_score_inputs(a.sq, a.sk, a.heads, a.d, cfg.diag_seed())?;
    let scale = (a.d as f64).sqrt();
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for (name, naive) in [("fused", false), ("naive", true)] {
        workspace::reset_peak();
        let base = workspace::live_elems();
        let t0 = Instant::now();
        let mut last = None;
        for _ in 0..a.reps {
            last = Some(if naive {
                coca_scores_naive(&q_raw, &q_rot, &t_rot, scale)?
            } else {
                coca_scores_fused(&q_raw, &q_rot, &t_rot, scale)?
            });
        }
        let mean_ms = t0.elapsed().as_secs_f64() * 1e3 / a.reps as f64;
        rows.push(BenchRow { path: name, mean_ms, peak_elems: workspace::reset_peak() - base });
        results.push(last.expect("reps >= 1"));
    }
    let norm = results[1].data.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    let rel = results[0].data.iter().zip(&results[1].data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / norm;
    let mut csv = String::from("path,sq,sk,heads,d,reps,mean_ms,peak_elems\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{}\n",
            r.path, a.sq, a.sk, a.heads, a.d, a.reps, r.mean_ms, r.peak_elems
        ));
    }
    fs::write(out.join("contraction.csv"), &csv)?;
    let mut m = Manifest::new("bench contraction", cfg.hash(), cfg.seed);
    m.outputs = vec!["contraction.csv".into()];
    m.details =
        serde_json::json!({ "max_rel_diff": rel, "peak_ratio": rows[1].peak_elems as f64 / rows[0].peak_elems as f64 });
    m.write(&out)?;
    print!("{csv}");
    println!(
        "peak ratio naive/fused: {:.2}  max relative difference: {rel:.3e}",
        rows[1].peak_elems as f64 / rows[0].peak_elems as f64
    );
    if rel > 1e-5 {
        bail!(Numeric, "fused and naive scores differ by {rel:.3e}");
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let tensors: Vec<serde_json::Value> = ck
        .tensors
        .iter()
        .map(|(s, data)| {
            let rms = (data.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / data.len().max(1) as f64).sqrt();
            serde_json::json!({ "name": s.name, "shape": s.shape, "rms": rms })
        })
        .collect();
    let n_model: usize = ck.tensors.iter().filter(|(s, _)| !s.name.starts_with("optim.")).map(|(_, d)| d.len()).sum();
    let summary = serde_json::json!({
        "step": ck.step,
        "config": ck.config,
        "model_parameters": n_model,
        "has_optimizer_state": ck.has_tree("optim.m."),
        "rng_state_bytes": ck.rng_state.len(),
        "metadata": ck.metadata,
        "tensors": tensors,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
