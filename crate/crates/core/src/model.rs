//! Pre-norm causal transformer with a selectable attention variant.
//!
//! Parameters live in a [`ModelParams`] tree whose tensors can be walked in a
//! fixed order; gradients and optimizer moments reuse the same tree, which is
//! what the checkpoint and the optimizer rely on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_backward, attention_forward, attention_forward_traced, check_heads, AttentionCache, AttentionGrads,
    AttentionParams, AttentionTrace, Variant,
};
use crate::error::{bail, Result};
use crate::real::{matmul, matmul_at, matmul_bt, Real};
use crate::rotary::{RotaryTable, DEFAULT_BASE};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub variant: Variant,
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Variant::Coca, 0)
    }
}

impl ModelConfig {
    /// 4 layers, width 128, 4 heads, trained at 64 tokens.
    pub fn desk(variant: Variant, seed: u64) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            max_seq: 64,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            rope_base: DEFAULT_BASE,
            variant,
            mlp_ratio: 4.0,
            seed,
        }
    }

    /// A model small enough for finite-difference checks.
    pub fn tiny(variant: Variant, seed: u64) -> Self {
        Self {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            max_seq: 16,
            vocab_size: 11,
            rope_base: DEFAULT_BASE,
            variant,
            mlp_ratio: 2.0,
            seed,
        }
    }

    /// The 350M-parameter configuration (24 layers, width 1024, 16 heads,
    /// 512 tokens). Recorded for reference; never instantiated in tests.
    pub fn paper_350m(variant: Variant, seed: u64) -> Self {
        Self {
            n_layers: 24,
            d_model: 1024,
            n_heads: 16,
            max_seq: 512,
            vocab_size: 50_304,
            rope_base: DEFAULT_BASE,
            variant,
            mlp_ratio: 4.0,
            seed,
        }
    }

    pub fn preset(name: &str, variant: Variant, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(variant, seed)),
            "tiny" => Ok(Self::tiny(variant, seed)),
            "paper-350m" => Ok(Self::paper_350m(variant, seed)),
            other => bail!(Config, "unknown model preset {other:?}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            bail!(Config, "n_layers must be at least 1");
        }
        check_heads(self.d_model, self.n_heads)?;
        if self.max_seq < 2 {
            bail!(Config, "max_seq must be at least 2");
        }
        if self.vocab_size == 0 {
            bail!(Config, "vocab_size must be positive");
        }
        if !(self.rope_base > 1.0) {
            bail!(Config, "rope_base must exceed 1");
        }
        if !(self.mlp_ratio > 0.0) || self.ff_dim() == 0 {
            bail!(Config, "mlp_ratio must give a positive hidden width");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        (self.mlp_ratio * self.d_model as f64).round() as usize
    }

    pub fn n_params(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ff_dim(), self.vocab_size);
        let layer = 4 * d + 4 * d * d + d * f + f + f * d + d;
        v * d + self.n_layers * layer + 2 * d + d * v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub attn: AttentionParams<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub fc1_w: Vec<T>,
    pub fc1_b: Vec<T>,
    pub fc2_w: Vec<T>,
    pub fc2_b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tok_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
    pub lm_head: Vec<T>,
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter paths and shapes in canonical order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let (d, f, v) = (cfg.d_model, cfg.ff_dim(), cfg.vocab_size);
    let spec = |name: String, shape: Vec<usize>| TensorSpec { name, shape };
    let mut out = vec![spec("tok_emb".into(), vec![v, d])];
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        out.push(spec(format!("{p}.ln1.gain"), vec![d]));
        out.push(spec(format!("{p}.ln1.bias"), vec![d]));
        out.push(spec(format!("{p}.attn.w_q"), vec![d, d]));
        out.push(spec(format!("{p}.attn.w_t"), vec![d, d]));
        out.push(spec(format!("{p}.attn.w_v"), vec![d, d]));
        out.push(spec(format!("{p}.attn.w_o"), vec![d, d]));
        out.push(spec(format!("{p}.ln2.gain"), vec![d]));
        out.push(spec(format!("{p}.ln2.bias"), vec![d]));
        out.push(spec(format!("{p}.mlp.fc1.weight"), vec![d, f]));
        out.push(spec(format!("{p}.mlp.fc1.bias"), vec![f]));
        out.push(spec(format!("{p}.mlp.fc2.weight"), vec![f, d]));
        out.push(spec(format!("{p}.mlp.fc2.bias"), vec![d]));
    }
    out.push(spec("ln_f.gain".into(), vec![d]));
    out.push(spec("ln_f.bias".into(), vec![d]));
    out.push(spec("lm_head".into(), vec![d, v]));
    out
}

impl<T: Real> ModelParams<T> {
    /// Builds the tree from flat tensors in [`param_specs`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Vec<T>>) -> Result<Self> {
        let specs = param_specs(cfg);
        if tensors.len() != specs.len() {
            bail!(Format, "expected {} tensors, got {}", specs.len(), tensors.len());
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.len() != t.len() {
                bail!(Format, "tensor {} has {} elements, expected {}", s.name, t.len(), s.len());
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let ln1_g = next();
            let ln1_b = next();
            let (w_q, w_t, w_v, w_o) = (next(), next(), next(), next());
            let attn = AttentionParams::new(w_q, w_t, w_v, w_o, cfg.d_model, cfg.n_heads)?;
            layers.push(LayerParams {
                ln1_g,
                ln1_b,
                attn,
                ln2_g: next(),
                ln2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            });
        }
        Ok(Self { tok_emb, layers, lnf_g: next(), lnf_b: next(), lm_head: next() })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = param_specs(cfg).iter().map(|s| vec![T::zero(); s.len()]).collect();
        Self::from_tensors(cfg, tensors).expect("zero tensors match their specs")
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.tok_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g[..],
                &l.ln1_b,
                &l.attn.w_q,
                &l.attn.w_t,
                &l.attn.w_v,
                &l.attn.w_o,
                &l.ln2_g,
                &l.ln2_b,
                &l.fc1_w,
                &l.fc1_b,
                &l.fc2_w,
                &l.fc2_b,
            ]);
        }
        out.extend([&self.lnf_g[..], &self.lnf_b, &self.lm_head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.attn.w_q,
                &mut l.attn.w_t,
                &mut l.attn.w_v,
                &mut l.attn.w_o,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.fc1_w,
                &mut l.fc1_b,
                &mut l.fc2_w,
                &mut l.fc2_b,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.lm_head]);
        out
    }

    pub fn n_elems(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> ModelParams<U> {
        let tensors = self.tensors().into_iter().map(crate::real::cast_slice).collect();
        ModelParams::from_tensors(cfg, tensors).expect("same layout")
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        self.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

pub type LayerCaches<T> = Vec<AttentionCache<T>>;

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    rotary: RotaryTable,
}

/// Deterministic initialisation: zero-mean normal weights with variance
/// `1 / d_model`, unit gains, zero biases. The draw order does not depend on
/// the attention variant.
pub fn init_model<T: Real>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("valid std");
    let tensors = param_specs(config)
        .iter()
        .map(|s| {
            let ones = s.name.ends_with(".gain");
            let zeros = s.name.ends_with(".bias");
            (0..s.len())
                .map(|_| {
                    if ones {
                        T::one()
                    } else if zeros {
                        T::zero()
                    } else {
                        T::of(normal.sample(&mut rng))
                    }
                })
                .collect()
        })
        .collect();
    Model::from_params(config.clone(), ModelParams::from_tensors(config, tensors)?)
}

struct LayerTrace<T> {
    ln1: NormTrace<T>,
    attn: AttentionTrace<T>,
    ln2: NormTrace<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
}

impl<T: Real> Model<T> {
    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let rotary = RotaryTable::new(config.head_dim(), config.rope_base, config.max_seq)?;
        Ok(Self { config, params, rotary })
    }

    pub fn rotary(&self) -> &RotaryTable {
        &self.rotary
    }

    /// Replaces the rotary table, e.g. by an NTK-rescaled or longer one.
    pub fn set_rotary(&mut self, table: RotaryTable) -> Result<()> {
        if table.head_dim() != self.config.head_dim() {
            bail!(Config, "rotary head_dim {} does not match model", table.head_dim());
        }
        self.rotary = table;
        Ok(())
    }

    pub fn with_rotary(mut self, table: RotaryTable) -> Result<Self> {
        self.set_rotary(table)?;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(&self.config), rotary: self.rotary.clone() }
    }

    pub fn empty_caches(&self) -> LayerCaches<T> {
        (0..self.config.n_layers).map(|_| AttentionCache::empty(self.config.n_heads, self.config.head_dim())).collect()
    }

    fn embed(&self, tokens: &[u32]) -> Result<Vec<T>> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= v {
                bail!(Input, "token {t} is outside the vocabulary of {v}");
            }
            x.extend_from_slice(&self.params.tok_emb[t as usize * d..(t as usize + 1) * d]);
        }
        Ok(x)
    }

    /// Logits `[seq x vocab]` for every input position. With `caches`, the
    /// tokens continue the cached prefix and the extended caches are returned.
    pub fn forward(&self, tokens: &[u32], caches: Option<&[AttentionCache<T>]>) -> Result<(Vec<T>, LayerCaches<T>)> {
        let cfg = &self.config;
        if let Some(c) = caches {
            if c.len() != cfg.n_layers {
                bail!(State, "expected {} layer caches, got {}", cfg.n_layers, c.len());
            }
        }
        let (d, seq) = (cfg.d_model, tokens.len());
        let mut x = self.embed(tokens)?;
        let mut new_caches = Vec::with_capacity(cfg.n_layers);
        for (l, layer) in self.params.layers.iter().enumerate() {
            let (a, _) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b, d);
            let (attn, cache) = attention_forward(&a, &layer.attn, &self.rotary, caches.map(|c| &c[l]), cfg.variant)?;
            new_caches.push(cache);
            add_in_place(&mut x, &attn);
            let (b, _) = layer_norm(&x, &layer.ln2_g, &layer.ln2_b, d);
            let (mlp, _, _) = mlp_forward(&b, layer, seq, d, cfg.ff_dim());
            add_in_place(&mut x, &mlp);
        }
        let (z, _) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b, d);
        let mut logits = vec![T::zero(); seq * cfg.vocab_size];
        matmul(&z, &self.params.lm_head, &mut logits, seq, d, cfg.vocab_size, false);
        Ok((logits, new_caches))
    }

    /// Normalised input `[seq x d_model]` that attention layer `layer` sees.
    pub fn attention_input(&self, tokens: &[u32], layer: usize) -> Result<Vec<T>> {
        let cfg = &self.config;
        if layer >= cfg.n_layers {
            bail!(Range, "layer {layer} does not exist (model has {})", cfg.n_layers);
        }
        let (d, seq) = (cfg.d_model, tokens.len());
        let mut x = self.embed(tokens)?;
        for (l, p) in self.params.layers.iter().enumerate() {
            let (a, _) = layer_norm(&x, &p.ln1_g, &p.ln1_b, d);
            if l == layer {
                return Ok(a);
            }
            let (attn, _) = attention_forward(&a, &p.attn, &self.rotary, None, cfg.variant)?;
            add_in_place(&mut x, &attn);
            let (b, _) = layer_norm(&x, &p.ln2_g, &p.ln2_b, d);
            let (mlp, _, _) = mlp_forward(&b, p, seq, d, cfg.ff_dim());
            add_in_place(&mut x, &mlp);
        }
        unreachable!("layer index checked above")
    }

    /// Mean next-token loss of one sequence; adds `weight * d loss / d params`
    /// into `grads`.
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        targets: &[u32],
        weight: f64,
        grads: &mut ModelParams<T>,
    ) -> Result<f64> {
        let cfg = &self.config;
        if tokens.len() != targets.len() {
            bail!(Input, "{} tokens but {} targets", tokens.len(), targets.len());
        }
        if tokens.is_empty() {
            bail!(Input, "empty sequence");
        }
        let (d, seq, f, v) = (cfg.d_model, tokens.len(), cfg.ff_dim(), cfg.vocab_size);

        let mut x = self.embed(tokens)?;
        let mut traces = Vec::with_capacity(cfg.n_layers);
        for layer in &self.params.layers {
            let (a, ln1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b, d);
            let (attn, _, attn_trace) = attention_forward_traced(&a, &layer.attn, &self.rotary, None, cfg.variant)?;
            let mut h = x.clone();
            add_in_place(&mut h, &attn);
            let (b, ln2) = layer_norm(&h, &layer.ln2_g, &layer.ln2_b, d);
            let (mlp, pre_act, act) = mlp_forward(&b, layer, seq, d, f);
            let mut out = h;
            add_in_place(&mut out, &mlp);
            traces.push(LayerTrace { ln1, attn: attn_trace, ln2, pre_act, act });
            x = out;
        }
        let (z, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b, d);
        let mut logits = vec![T::zero(); seq * v];
        matmul(&z, &self.params.lm_head, &mut logits, seq, d, v, false);

        let (loss, mut d_logits) = cross_entropy_with_grad(&logits, v, targets)?;
        let w = T::of(weight);
        d_logits.iter_mut().for_each(|g| *g *= w);

        matmul_at(&z, &d_logits, &mut grads.lm_head, d, seq, v, true);
        let mut dz = vec![T::zero(); seq * d];
        matmul_bt(&d_logits, &self.params.lm_head, &mut dz, seq, v, d, false);
        let mut dx = layer_norm_backward(&dz, &lnf, &self.params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b, d);

        for ((layer, trace), g) in self.params.layers.iter().zip(&traces).zip(grads.layers.iter_mut()).rev() {
            // out = h + mlp(ln2(h))
            let d_b = mlp_backward(&dx, layer, g, trace, seq, d, f);
            let d_h_norm = layer_norm_backward(&d_b, &trace.ln2, &layer.ln2_g, &mut g.ln2_g, &mut g.ln2_b, d);
            let mut d_h = dx;
            add_in_place(&mut d_h, &d_h_norm);
            // h = x + attn(ln1(x))
            let mut ag = AttentionGrads {
                w_q: std::mem::take(&mut g.attn.w_q),
                w_t: std::mem::take(&mut g.attn.w_t),
                w_v: std::mem::take(&mut g.attn.w_v),
                w_o: std::mem::take(&mut g.attn.w_o),
            };
            let d_a = attention_backward(&layer.attn, &self.rotary, cfg.variant, &trace.attn, &d_h, &mut ag)?;
            g.attn.w_q = ag.w_q;
            g.attn.w_t = ag.w_t;
            g.attn.w_v = ag.w_v;
            g.attn.w_o = ag.w_o;
            let d_x_norm = layer_norm_backward(&d_a, &trace.ln1, &layer.ln1_g, &mut g.ln1_g, &mut g.ln1_b, d);
            add_in_place(&mut d_h, &d_x_norm);
            dx = d_h;
        }
        for (p, &t) in tokens.iter().enumerate() {
            let row = &mut grads.tok_emb[t as usize * d..(t as usize + 1) * d];
            for (r, &g) in row.iter_mut().zip(&dx[p * d..(p + 1) * d]) {
                *r += g;
            }
        }
        Ok(loss)
    }

    /// Mean next-token loss without gradients.
    pub fn loss(&self, tokens: &[u32], targets: &[u32]) -> Result<f64> {
        let (logits, _) = self.forward(tokens, None)?;
        next_token_loss(&logits, self.config.vocab_size, targets)
    }
}

fn add_in_place<T: Real>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

struct NormTrace<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], d: usize) -> (Vec<T>, NormTrace<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let n = T::of(d as f64);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            xhat[r * d + i] = xh;
            y[r * d + i] = xh * gain[i] + bias[i];
        }
    }
    (y, NormTrace { xhat, rstd })
}

fn layer_norm_backward<T: Real>(
    dy: &[T],
    trace: &NormTrace<T>,
    gain: &[T],
    d_gain: &mut [T],
    d_bias: &mut [T],
    d: usize,
) -> Vec<T> {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let n = T::of(d as f64);
    for r in 0..rows {
        let g = &dy[r * d..(r + 1) * d];
        let xh = &trace.xhat[r * d..(r + 1) * d];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for i in 0..d {
            d_gain[i] += g[i] * xh[i];
            d_bias[i] += g[i];
            let dxh = g[i] * gain[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
        }
        let rs = trace.rstd[r];
        for i in 0..d {
            let dxh = g[i] * gain[i];
            dx[r * d + i] = rs * (dxh - sum_dxh / n - xh[i] * sum_dxh_xh / n);
        }
    }
    dx
}

// 1 + tanh(u) = 2 sigmoid(2u); exp is much cheaper than tanh in libm.
fn gelu_sigmoid<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let u = c * (x + k * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn gelu<T: Real>(x: T) -> T {
    x * gelu_sigmoid(x)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let s = gelu_sigmoid(x);
    // sech^2(u) = 4 s (1 - s)
    let two = T::of(2.0);
    s + two * x * s * (T::one() - s) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn mlp_forward<T: Real>(b: &[T], layer: &LayerParams<T>, seq: usize, d: usize, f: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut pre = vec![T::zero(); seq * f];
    for r in 0..seq {
        pre[r * f..(r + 1) * f].copy_from_slice(&layer.fc1_b);
    }
    matmul(b, &layer.fc1_w, &mut pre, seq, d, f, true);
    let act: Vec<T> = pre.iter().map(|&x| gelu(x)).collect();
    let mut out = vec![T::zero(); seq * d];
    for r in 0..seq {
        out[r * d..(r + 1) * d].copy_from_slice(&layer.fc2_b);
    }
    matmul(&act, &layer.fc2_w, &mut out, seq, f, d, true);
    (out, pre, act)
}

/// Returns the gradient with respect to the MLP input `b = ln2(h)`.
fn mlp_backward<T: Real>(
    d_out: &[T],
    layer: &LayerParams<T>,
    g: &mut LayerParams<T>,
    trace: &LayerTrace<T>,
    seq: usize,
    d: usize,
    f: usize,
) -> Vec<T> {
    matmul_at(&trace.act, d_out, &mut g.fc2_w, f, seq, d, true);
    for r in 0..seq {
        add_in_place(&mut g.fc2_b, &d_out[r * d..(r + 1) * d]);
    }
    let mut d_act = vec![T::zero(); seq * f];
    matmul_bt(d_out, &layer.fc2_w, &mut d_act, seq, d, f, false);
    for (da, &x) in d_act.iter_mut().zip(&trace.pre_act) {
        *da *= gelu_grad(x);
    }
    // recompute b = ln2(h) from the stored normalised values
    let b: Vec<T> = trace
        .ln2
        .xhat
        .chunks_exact(d)
        .flat_map(|row| row.iter().enumerate().map(|(i, &xh)| xh * layer.ln2_g[i] + layer.ln2_b[i]))
        .collect();
    matmul_at(&b, &d_act, &mut g.fc1_w, d, seq, f, true);
    for r in 0..seq {
        add_in_place(&mut g.fc1_b, &d_act[r * f..(r + 1) * f]);
    }
    let mut d_b = vec![T::zero(); seq * d];
    matmul_bt(&d_act, &layer.fc1_w, &mut d_b, seq, f, d, false);
    d_b
}

fn row_log_softmax_at<T: Real>(row: &[T], target: usize) -> f64 {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max).to_f64_lossy();
    let lse = max + row.iter().map(|&x| (x.to_f64_lossy() - max).exp()).sum::<f64>().ln();
    row[target].to_f64_lossy() - lse
}

/// Mean cross-entropy in nats of `logits: [rows x vocab]` against `targets`.
pub fn next_token_loss<T: Real>(logits: &[T], vocab: usize, targets: &[u32]) -> Result<f64> {
    if vocab == 0 || logits.len() != targets.len() * vocab {
        bail!(Input, "{} logits do not match {} targets over vocab {vocab}", logits.len(), targets.len());
    }
    if targets.is_empty() {
        bail!(Input, "no targets");
    }
    let mut total = 0.0;
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        if t as usize >= vocab {
            bail!(Input, "target {t} is outside the vocabulary of {vocab}");
        }
        total -= row_log_softmax_at(row, t as usize);
    }
    let loss = total / targets.len() as f64;
    if !loss.is_finite() {
        bail!(Numeric, "non-finite loss");
    }
    Ok(loss)
}

/// Per-position negative log-likelihoods.
pub fn token_nlls<T: Real>(logits: &[T], vocab: usize, targets: &[u32]) -> Result<Vec<f64>> {
    if logits.len() != targets.len() * vocab {
        bail!(Input, "{} logits do not match {} targets", logits.len(), targets.len());
    }
    logits
        .chunks_exact(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            if t as usize >= vocab {
                bail!(Input, "target {t} is outside the vocabulary of {vocab}");
            }
            Ok(-row_log_softmax_at(row, t as usize))
        })
        .collect()
}

fn cross_entropy_with_grad<T: Real>(logits: &[T], vocab: usize, targets: &[u32]) -> Result<(f64, Vec<T>)> {
    let loss = next_token_loss(logits, vocab, targets)?;
    let inv_n = T::of(1.0 / targets.len() as f64);
    let mut grad = vec![T::zero(); logits.len()];
    for ((row, g), &t) in logits.chunks_exact(vocab).zip(grad.chunks_exact_mut(vocab)).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi = (x - max).exp();
            total += *gi;
        }
        for gi in g.iter_mut() {
            *gi = *gi / total * inv_n;
        }
        g[t as usize] -= inv_n;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(Variant::Coca, 0);
        assert!(c.validate().is_ok());
        c.n_layers = 0;
        assert!(matches!(init_model::<f64>(&c), Err(crate::CocaError::Config(_))));
        let mut c = ModelConfig::tiny(Variant::Coca, 0);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(Variant::Coca, 0);
        c.d_model = 6; // head_dim 3
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(Variant::Coca, 0);
        c.max_seq = 1;
        assert!(c.validate().is_err());
        assert!(ModelConfig::paper_350m(Variant::Coca, 0).validate().is_ok());
    }

    #[test]
    fn param_count_matches_specs() {
        for cfg in [ModelConfig::tiny(Variant::Coca, 0), ModelConfig::desk(Variant::Baseline, 0)] {
            let n: usize = param_specs(&cfg).iter().map(TensorSpec::len).sum();
            assert_eq!(n, cfg.n_params());
        }
        let p = ModelConfig::paper_350m(Variant::Coca, 0).n_params();
        assert!(p > 300_000_000 && p < 420_000_000, "{p}");
    }

    #[test]
    fn init_is_deterministic_and_variant_independent() {
        let a = init_model::<f32>(&ModelConfig::tiny(Variant::Coca, 5)).unwrap();
        let b = init_model::<f32>(&ModelConfig::tiny(Variant::Coca, 5)).unwrap();
        assert_eq!(a.params, b.params);
        let c = init_model::<f32>(&ModelConfig::tiny(Variant::Baseline, 5)).unwrap();
        assert_eq!(a.params, c.params);
        let d = init_model::<f32>(&ModelConfig::tiny(Variant::Coca, 6)).unwrap();
        assert_ne!(a.params, d.params);
    }

    #[test]
    fn loss_examples() {
        let v = 7;
        let logits = vec![0.0f64; 3 * v];
        let l = next_token_loss(&logits, v, &[0, 3, 6]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let l = next_token_loss(&[0.0f64, 0.0, 0.0, 0.0], 2, &[1, 0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let mut sharp = vec![-50.0f64; 2 * v];
        sharp[2] = 50.0;
        sharp[v + 5] = 50.0;
        assert!(next_token_loss(&sharp, v, &[2, 5]).unwrap() < 1e-12);
        assert!(matches!(next_token_loss(&logits, v, &[0, 1]), Err(crate::CocaError::Input(_))));
    }

    #[test]
    fn single_token_forward_shape_and_range_check() {
        let m = init_model::<f32>(&ModelConfig::tiny(Variant::Coca, 1)).unwrap();
        let (logits, caches) = m.forward(&[3], None).unwrap();
        assert_eq!(logits.len(), m.config.vocab_size);
        assert_eq!(caches.len(), 1);
        assert_eq!(caches[0].len(), 1);
        assert!(matches!(m.forward(&[11], None), Err(crate::CocaError::Input(_))));
        let too_long: Vec<u32> = vec![1; 17];
        assert!(matches!(m.forward(&too_long, None), Err(crate::CocaError::Range(_))));
    }
}
