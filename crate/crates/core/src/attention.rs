//! Collinear constrained attention (CoCA) and the plain RoPE baseline.
//!
//! CoCA derives every key from the query it is scored against: the constraint
//! coefficients `t_n = W_t x_n` are folded in half, averaged, clamped at zero
//! and duplicated, so that in each complex plane `j` the effective key
//! `k_{m,n,j} = q_{m,j} * t_{n,j}` is a non-negative real multiple of the
//! query. The score reduces to
//!
//! ```text
//! a(m, n) = sum_j t_{n,j} |q_{m,j}|^2 cos((m - n) theta_j)
//! ```
//!
//! and is computed as a three-operand contraction of the unrotated query,
//! the rotated coefficients and the rotated query. Contracting the two query
//! operands first keeps the scratch at `O(sq * d)` per head instead of the
//! `O(sq * sk * d)` key tensor.
//!
//! Rotated coefficients are stored in the duplicated layout, i.e. component
//! `j` holds `t_j (1 + i) e^{i n theta_j}`; the contraction multiplies by
//! `(1 - i) / 2` to recover `t_j e^{i n theta_j}`.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::real::{matmul, matmul_at, matmul_bt, Real};
use crate::rotary::{apply_inverse_rotation, apply_rotation, RotaryTable};
use crate::tensor::{HeadTensor, ScoreTensor};
use crate::workspace::TrackedBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Coca,
    Baseline,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Coca => "coca",
            Variant::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::CocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coca" => Ok(Variant::Coca),
            "baseline" => Ok(Variant::Baseline),
            other => bail!(Config, "unknown attention variant {other:?}"),
        }
    }
}

/// Projection weights of one attention layer, applied as `x @ W` on row
/// vectors. For the baseline variant `w_t` is the key projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Vec<T>,
    pub w_t: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: Vec<T>,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub score_scale: f64,
}

impl<T: Real> AttentionParams<T> {
    pub fn new(w_q: Vec<T>, w_t: Vec<T>, w_v: Vec<T>, w_o: Vec<T>, d_model: usize, n_heads: usize) -> Result<Self> {
        let head_dim = check_heads(d_model, n_heads)?;
        let params = Self { w_q, w_t, w_v, w_o, d_model, n_heads, head_dim, score_scale: (head_dim as f64).sqrt() };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let head_dim = check_heads(self.d_model, self.n_heads)?;
        if head_dim != self.head_dim {
            bail!(Config, "head_dim {} != d_model / n_heads = {head_dim}", self.head_dim);
        }
        if !(self.score_scale > 0.0) {
            bail!(Config, "score_scale must be positive, got {}", self.score_scale);
        }
        let n = self.d_model * self.d_model;
        for (name, w) in [("w_q", &self.w_q), ("w_t", &self.w_t), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.len() != n {
                bail!(Dimension, "{name} has {} elements, expected {n}", w.len());
            }
        }
        Ok(())
    }
}

pub(crate) fn check_heads(d_model: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
        bail!(Config, "d_model {d_model} is not divisible into {n_heads} heads");
    }
    let head_dim = d_model / n_heads;
    if !head_dim.is_multiple_of(2) {
        bail!(Config, "head_dim {head_dim} must be even");
    }
    Ok(head_dim)
}

/// Folded, ReLU-clamped, duplicated constraint coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedT<T>(HeadTensor<T>);

impl<T: Real> FoldedT<T> {
    pub fn values(&self) -> &HeadTensor<T> {
        &self.0
    }

    pub fn into_inner(self) -> HeadTensor<T> {
        self.0
    }
}

/// `out[j] = out[j + d/2] = max(0, (t[j] + t[j + d/2]) / 2)`.
pub fn fold_relu_t<T: Real>(t_raw: &HeadTensor<T>) -> Result<FoldedT<T>> {
    if !t_raw.head_dim.is_multiple_of(2) {
        bail!(Config, "head_dim {} must be even to fold", t_raw.head_dim);
    }
    let half = t_raw.head_dim / 2;
    let two = T::of(2.0);
    let mut out = t_raw.clone();
    for v in out.data.chunks_exact_mut(t_raw.head_dim) {
        for j in 0..half {
            let avg = ((v[j] + v[j + half]) / two).max(T::zero());
            v[j] = avg;
            v[j + half] = avg;
        }
    }
    Ok(FoldedT(out))
}

/// Gradient of [`fold_relu_t`]: `d t_raw[j] = d t_raw[j + d/2] = (g[j] + g[j + d/2]) / 2`
/// where the folded value is positive.
pub fn fold_relu_t_backward<T: Real>(folded: &FoldedT<T>, grad: &HeadTensor<T>) -> HeadTensor<T> {
    let d = grad.head_dim;
    let half = d / 2;
    let two = T::of(2.0);
    let mut out = grad.clone();
    for (g, f) in out.data.chunks_exact_mut(d).zip(folded.0.data.chunks_exact(d)) {
        for j in 0..half {
            let v = if f[j] > T::zero() { (g[j] + g[j + half]) / two } else { T::zero() };
            g[j] = v;
            g[j + half] = v;
        }
    }
    out
}

/// Unrotated effective keys `k_j = t_j q_j` of a query sequence against the
/// folded coefficients of the same positions.
pub fn coca_effective_keys<T: Real>(q_raw: &HeadTensor<T>, t: &FoldedT<T>) -> Result<HeadTensor<T>> {
    let t = t.values();
    check_same(q_raw, t, "query and coefficient shapes differ")?;
    if q_raw.seq != t.seq {
        bail!(Dimension, "q_raw has {} rows but t has {}", q_raw.seq, t.seq);
    }
    let mut out = q_raw.clone();
    for (k, &c) in out.data.iter_mut().zip(&t.data) {
        *k *= c;
    }
    Ok(out)
}

/// Past rotated keys and values of one layer. For CoCA the key slot holds the
/// rotated folded coefficients (keys depend on the query and cannot be
/// cached); for the baseline it holds the rotated keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache<T> {
    pub folded_rotated_t: HeadTensor<T>,
    pub past_values: HeadTensor<T>,
}

impl<T: Real> AttentionCache<T> {
    pub fn empty(heads: usize, head_dim: usize) -> Self {
        Self {
            folded_rotated_t: HeadTensor::zeros(0, heads, head_dim),
            past_values: HeadTensor::zeros(0, heads, head_dim),
        }
    }

    pub fn len(&self) -> usize {
        self.folded_rotated_t.seq
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_same(a: &HeadTensor<impl Real>, b: &HeadTensor<impl Real>, what: &str) -> Result<()> {
    if a.heads != b.heads || a.head_dim != b.head_dim {
        bail!(Dimension, "{what}: [.. x {} x {}] vs [.. x {} x {}]", a.heads, a.head_dim, b.heads, b.head_dim);
    }
    Ok(())
}

fn check_score_inputs<T: Real>(q_raw: &HeadTensor<T>, q_rot: &HeadTensor<T>, t_rot: &HeadTensor<T>) -> Result<()> {
    check_same(q_raw, q_rot, "query shapes differ")?;
    check_same(q_raw, t_rot, "query and coefficient shapes differ")?;
    if q_raw.seq != q_rot.seq {
        bail!(Dimension, "q_raw has {} rows but q_rot has {}", q_raw.seq, q_rot.seq);
    }
    if !q_raw.head_dim.is_multiple_of(2) {
        bail!(Dimension, "head_dim {} must be even", q_raw.head_dim);
    }
    Ok(())
}

/// Packs `conj(q_rot) * q_raw` per component as `[Re, -Im]` halves, so that
/// the score is a real dot product with the packed coefficients.
fn pack_query<T: Real>(q_raw: &[T], q_rot: &[T], out: &mut [T]) {
    let half = q_raw.len() / 2;
    for j in 0..half {
        let (br, bi) = (q_raw[j], q_raw[j + half]);
        let (ar, ai) = (q_rot[j], q_rot[j + half]);
        out[j] = ar * br + ai * bi;
        out[j + half] = ai * br - ar * bi;
    }
}

/// Packs `t_rot * (1 - i) / 2` per component as `[Re, Im]` halves.
fn pack_coeff<T: Real>(t_rot: &[T], out: &mut [T]) {
    let half = t_rot.len() / 2;
    let two = T::of(2.0);
    for j in 0..half {
        let (x, y) = (t_rot[j], t_rot[j + half]);
        out[j] = (x + y) / two;
        out[j + half] = (y - x) / two;
    }
}

/// CoCA scores `[heads x sq x sk]` by the fused contraction.
pub fn coca_scores_fused<T: Real>(
    q_raw: &HeadTensor<T>,
    q_rot: &HeadTensor<T>,
    t_rot: &HeadTensor<T>,
    score_scale: f64,
) -> Result<ScoreTensor<T>> {
    check_score_inputs(q_raw, q_rot, t_rot)?;
    let (heads, sq, sk, d) = (q_raw.heads, q_raw.seq, t_rot.seq, q_raw.head_dim);
    let mut out = TrackedBuf::<T>::zeros(heads * sq * sk);
    let mut wq = TrackedBuf::<T>::zeros(sq * d);
    let mut wt = TrackedBuf::<T>::zeros(sk * d);
    let alpha = T::of(1.0 / score_scale);
    for h in 0..heads {
        for m in 0..sq {
            pack_query(q_raw.vector(m, h), q_rot.vector(m, h), &mut wq.as_mut_slice()[m * d..(m + 1) * d]);
        }
        for n in 0..sk {
            pack_coeff(t_rot.vector(n, h), &mut wt.as_mut_slice()[n * d..(n + 1) * d]);
        }
        let scores = &mut out.as_mut_slice()[h * sq * sk..(h + 1) * sq * sk];
        T::gemm(
            sq,
            d,
            sk,
            alpha,
            wq.as_slice(),
            d as isize,
            1,
            wt.as_slice(),
            1,
            d as isize,
            T::zero(),
            scores,
            sk as isize,
            1,
        );
    }
    Ok(ScoreTensor { data: out.into_vec(), heads, sq, sk })
}

/// Reference CoCA scores that materialise the Hadamard keys
/// `k[m, n] = rotate(q_raw[m] o t[n], n)` for every query/key pair and then
/// take `<q_rot[m], k[m, n]>`. Memory is `O(heads * sq * sk * d)`.
pub fn coca_scores_naive<T: Real>(
    q_raw: &HeadTensor<T>,
    q_rot: &HeadTensor<T>,
    t_rot: &HeadTensor<T>,
    score_scale: f64,
) -> Result<ScoreTensor<T>> {
    check_score_inputs(q_raw, q_rot, t_rot)?;
    let (heads, sq, sk, d) = (q_raw.heads, q_raw.seq, t_rot.seq, q_raw.head_dim);
    let half = d / 2;
    let two = T::of(2.0);
    let mut keys = TrackedBuf::<T>::zeros(heads * sq * sk * d);
    {
        let keys = keys.as_mut_slice();
        for h in 0..heads {
            for m in 0..sq {
                let q = q_raw.vector(m, h);
                for n in 0..sk {
                    let t = t_rot.vector(n, h);
                    let k = &mut keys[((h * sq + m) * sk + n) * d..][..d];
                    for j in 0..half {
                        // q_j * t_j e^{i n theta_j}, with t_j e^{i n theta} = t_rot_j (1 - i) / 2
                        let (cr, ci) = ((t[j] + t[j + half]) / two, (t[j + half] - t[j]) / two);
                        k[j] = q[j] * cr - q[j + half] * ci;
                        k[j + half] = q[j] * ci + q[j + half] * cr;
                    }
                }
            }
        }
    }
    let mut out = TrackedBuf::<T>::zeros(heads * sq * sk);
    let inv = T::of(1.0 / score_scale);
    for h in 0..heads {
        for m in 0..sq {
            let q = q_rot.vector(m, h);
            for n in 0..sk {
                let k = &keys.as_slice()[((h * sq + m) * sk + n) * d..][..d];
                let dot: T = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                out.as_mut_slice()[(h * sq + m) * sk + n] = dot * inv;
            }
        }
    }
    Ok(ScoreTensor { data: out.into_vec(), heads, sq, sk })
}

/// Standard RoPE scores `<q_rot[m], k_rot[n]> / scale`.
pub fn rope_scores_baseline<T: Real>(
    q_rot: &HeadTensor<T>,
    k_rot: &HeadTensor<T>,
    score_scale: f64,
) -> Result<ScoreTensor<T>> {
    check_same(q_rot, k_rot, "query and key shapes differ")?;
    let (heads, sq, sk, d) = (q_rot.heads, q_rot.seq, k_rot.seq, q_rot.head_dim);
    let mut out = TrackedBuf::<T>::zeros(heads * sq * sk);
    let width = (heads * d) as isize;
    for h in 0..heads {
        let scores = &mut out.as_mut_slice()[h * sq * sk..(h + 1) * sq * sk];
        T::gemm(
            sq,
            d,
            sk,
            T::of(1.0 / score_scale),
            &q_rot.data[h * d..],
            width,
            1,
            &k_rot.data[h * d..],
            1,
            width,
            T::zero(),
            scores,
            sk as isize,
            1,
        );
    }
    Ok(ScoreTensor { data: out.into_vec(), heads, sq, sk })
}

/// Causal mask plus row softmax. Query row `m` sits at absolute position
/// `query_offset + m`; key `n` is visible when `n <= query_offset + m`.
pub fn causal_mask_softmax<T: Real>(scores: &ScoreTensor<T>, query_offset: usize) -> Result<ScoreTensor<T>> {
    let mut probs = scores.clone();
    let sk = scores.sk;
    if sk == 0 && scores.sq > 0 {
        bail!(Input, "cannot normalise a row with no visible keys");
    }
    for h in 0..scores.heads {
        for m in 0..scores.sq {
            let visible = (query_offset + m + 1).min(sk);
            let row = &mut probs.data[(h * scores.sq + m) * sk..][..sk];
            let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
            if !max.is_finite() {
                bail!(Numeric, "non-finite attention score in head {h}, row {m}");
            }
            let mut total = T::zero();
            for x in &mut row[..visible] {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in &mut row[..visible] {
                *x /= total;
            }
            for x in &mut row[visible..] {
                *x = T::zero();
            }
        }
    }
    Ok(probs)
}

/// Gradient of a row softmax: `dS = P * (dP - sum(dP * P))`.
pub fn softmax_backward<T: Real>(probs: &ScoreTensor<T>, grad: &ScoreTensor<T>) -> ScoreTensor<T> {
    let mut out = grad.clone();
    for (g, p) in out.data.chunks_exact_mut(probs.sk).zip(probs.data.chunks_exact(probs.sk)) {
        let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
        for (gi, &pi) in g.iter_mut().zip(p) {
            *gi = pi * (*gi - dot);
        }
    }
    out
}

/// Gradients of the fused CoCA scores with respect to its three operands,
/// by the product rule applied to `Re(conj(q_rot) * q_raw * tau)`.
pub struct CocaScoreGrads<T> {
    pub q_raw: HeadTensor<T>,
    pub q_rot: HeadTensor<T>,
    pub t_rot: HeadTensor<T>,
}

pub fn coca_scores_backward<T: Real>(
    q_raw: &HeadTensor<T>,
    q_rot: &HeadTensor<T>,
    t_rot: &HeadTensor<T>,
    grad: &ScoreTensor<T>,
    score_scale: f64,
) -> Result<CocaScoreGrads<T>> {
    check_score_inputs(q_raw, q_rot, t_rot)?;
    let (heads, sq, sk, d) = (q_raw.heads, q_raw.seq, t_rot.seq, q_raw.head_dim);
    if grad.heads != heads || grad.sq != sq || grad.sk != sk {
        bail!(Dimension, "score gradient shape does not match the operands");
    }
    let half = d / 2;
    let two = T::of(2.0);
    let inv = T::of(1.0 / score_scale);
    let mut d_raw = HeadTensor::zeros(sq, heads, d);
    let mut d_rot = HeadTensor::zeros(sq, heads, d);
    let mut d_t = HeadTensor::zeros(sk, heads, d);
    let mut wq = vec![T::zero(); sq * d];
    let mut wt = vec![T::zero(); sk * d];
    let mut dwq = vec![T::zero(); sq * d];
    let mut dwt = vec![T::zero(); sk * d];
    for h in 0..heads {
        for m in 0..sq {
            pack_query(q_raw.vector(m, h), q_rot.vector(m, h), &mut wq[m * d..(m + 1) * d]);
        }
        for n in 0..sk {
            pack_coeff(t_rot.vector(n, h), &mut wt[n * d..(n + 1) * d]);
        }
        let g = grad.head(h);
        // dW = G @ Wt, dWt = G^T @ Wq
        T::gemm(sq, sk, d, inv, g, sk as isize, 1, &wt, d as isize, 1, T::zero(), &mut dwq, d as isize, 1);
        T::gemm(sk, sq, d, inv, g, 1, sk as isize, &wq, d as isize, 1, T::zero(), &mut dwt, d as isize, 1);
        for m in 0..sq {
            let (b, a) = (q_raw.vector(m, h), q_rot.vector(m, h));
            let dw = &dwq[m * d..(m + 1) * d];
            let (dra, drb) = {
                let mut ga = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for j in 0..half {
                    // W = [P, -Q] with P = ar br + ai bi, Q = ar bi - ai br
                    let dp = dw[j];
                    let dq = -dw[j + half];
                    let (ar, ai, br, bi) = (a[j], a[j + half], b[j], b[j + half]);
                    ga[j] = dp * br + dq * bi;
                    ga[j + half] = dp * bi - dq * br;
                    gb[j] = dp * ar - dq * ai;
                    gb[j + half] = dp * ai + dq * ar;
                }
                (ga, gb)
            };
            d_rot.vector_mut(m, h).copy_from_slice(&dra);
            d_raw.vector_mut(m, h).copy_from_slice(&drb);
        }
        for n in 0..sk {
            let dw = &dwt[n * d..(n + 1) * d];
            let out = d_t.vector_mut(n, h);
            for j in 0..half {
                let (dc, ds) = (dw[j], dw[j + half]);
                out[j] = (dc - ds) / two;
                out[j + half] = (dc + ds) / two;
            }
        }
    }
    Ok(CocaScoreGrads { q_raw: d_raw, q_rot: d_rot, t_rot: d_t })
}

/// Intermediates of one attention call, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    pub seq: usize,
    pub offset: usize,
    pub x: Vec<T>,
    pub q_raw: HeadTensor<T>,
    pub q_rot: HeadTensor<T>,
    pub folded: Option<FoldedT<T>>,
    pub keys: HeadTensor<T>,
    pub values: HeadTensor<T>,
    pub probs: ScoreTensor<T>,
    pub context: Vec<T>,
}

/// One attention layer over `x: [seq x d_model]`. Positions start at the cache
/// length; the returned cache holds all past and current keys/values.
pub fn attention_forward<T: Real>(
    x: &[T],
    params: &AttentionParams<T>,
    table: &RotaryTable,
    cache: Option<&AttentionCache<T>>,
    variant: Variant,
) -> Result<(Vec<T>, AttentionCache<T>)> {
    let (y, cache, _) = attention_forward_traced(x, params, table, cache, variant)?;
    Ok((y, cache))
}

pub fn attention_forward_traced<T: Real>(
    x: &[T],
    params: &AttentionParams<T>,
    table: &RotaryTable,
    cache: Option<&AttentionCache<T>>,
    variant: Variant,
) -> Result<(Vec<T>, AttentionCache<T>, AttentionTrace<T>)> {
    let (dm, heads, hd) = (params.d_model, params.n_heads, params.head_dim);
    if !x.len().is_multiple_of(dm) {
        bail!(Dimension, "input of {} elements is not a multiple of d_model {dm}", x.len());
    }
    if table.head_dim() != hd {
        bail!(State, "rotary table head_dim {} does not match attention head_dim {hd}", table.head_dim());
    }
    let seq = x.len() / dm;
    let offset = match cache {
        Some(c) => {
            if c.folded_rotated_t.heads != heads
                || c.folded_rotated_t.head_dim != hd
                || c.past_values.heads != heads
                || c.past_values.head_dim != hd
                || c.past_values.seq != c.folded_rotated_t.seq
            {
                bail!(State, "attention cache layout does not match the layer");
            }
            c.len()
        }
        None => 0,
    };
    if offset + seq > table.max_pos() {
        bail!(Range, "positions up to {} exceed rotary capacity {}", offset + seq, table.max_pos());
    }

    let project = |w: &[T]| -> HeadTensor<T> {
        let mut out = vec![T::zero(); seq * dm];
        matmul(x, w, &mut out, seq, dm, dm, false);
        HeadTensor { data: out, seq, heads, head_dim: hd }
    };
    let q_raw = project(&params.w_q);
    let t_raw = project(&params.w_t);
    let v = project(&params.w_v);
    let q_rot = apply_rotation(&q_raw, table, offset)?;
    let (folded, k_rot) = match variant {
        Variant::Coca => {
            let folded = fold_relu_t(&t_raw)?;
            let rotated = apply_rotation(folded.values(), table, offset)?;
            (Some(folded), rotated)
        }
        Variant::Baseline => (None, apply_rotation(&t_raw, table, offset)?),
    };

    let (keys, values) = match cache {
        Some(c) => (c.folded_rotated_t.concat_rows(&k_rot)?, c.past_values.concat_rows(&v)?),
        None => (k_rot, v),
    };

    let scores = match variant {
        Variant::Coca => coca_scores_fused(&q_raw, &q_rot, &keys, params.score_scale)?,
        Variant::Baseline => rope_scores_baseline(&q_rot, &keys, params.score_scale)?,
    };
    let probs = causal_mask_softmax(&scores, offset)?;

    let sk = keys.seq;
    let mut context = vec![T::zero(); seq * dm];
    for h in 0..heads {
        // ctx[:, h, :] = P_h @ V[:, h, :]
        T::gemm(
            seq,
            sk,
            hd,
            T::one(),
            probs.head(h),
            sk as isize,
            1,
            &values.data[h * hd..],
            dm as isize,
            1,
            T::zero(),
            &mut context[h * hd..],
            dm as isize,
            1,
        );
    }
    let mut y = vec![T::zero(); seq * dm];
    matmul(&context, &params.w_o, &mut y, seq, dm, dm, false);

    let new_cache = AttentionCache { folded_rotated_t: keys.clone(), past_values: values.clone() };
    let trace = AttentionTrace { seq, offset, x: x.to_vec(), q_raw, q_rot, folded, keys, values, probs, context };
    Ok((y, new_cache, trace))
}

#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub w_q: Vec<T>,
    pub w_t: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: Vec<T>,
}

/// Backward pass of [`attention_forward_traced`] for a cache-free call.
/// Returns the input gradient and accumulates weight gradients into `grads`.
pub fn attention_backward<T: Real>(
    params: &AttentionParams<T>,
    table: &RotaryTable,
    variant: Variant,
    trace: &AttentionTrace<T>,
    dy: &[T],
    grads: &mut AttentionGrads<T>,
) -> Result<Vec<T>> {
    let (dm, heads, hd, seq) = (params.d_model, params.n_heads, params.head_dim, trace.seq);
    if trace.offset != 0 || trace.keys.seq != seq {
        bail!(State, "backward is only defined for cache-free attention calls");
    }
    if dy.len() != seq * dm {
        bail!(Dimension, "output gradient has {} elements, expected {}", dy.len(), seq * dm);
    }
    // y = ctx @ W_o
    matmul_at(&trace.context, dy, &mut grads.w_o, dm, seq, dm, true);
    let mut d_ctx = vec![T::zero(); seq * dm];
    matmul_bt(dy, &params.w_o, &mut d_ctx, seq, dm, dm, false);

    let mut d_probs = ScoreTensor::zeros(heads, seq, seq);
    let mut d_v = HeadTensor::zeros(seq, heads, hd);
    for h in 0..heads {
        // dP_h = dCtx_h @ V_h^T ; dV_h = P_h^T @ dCtx_h
        T::gemm(
            seq,
            hd,
            seq,
            T::one(),
            &d_ctx[h * hd..],
            dm as isize,
            1,
            &trace.values.data[h * hd..],
            1,
            dm as isize,
            T::zero(),
            &mut d_probs.data[h * seq * seq..],
            seq as isize,
            1,
        );
        T::gemm(
            seq,
            seq,
            hd,
            T::one(),
            trace.probs.head(h),
            1,
            seq as isize,
            &d_ctx[h * hd..],
            dm as isize,
            1,
            T::zero(),
            &mut d_v.data[h * hd..],
            dm as isize,
            1,
        );
    }
    let d_scores = softmax_backward(&trace.probs, &d_probs);

    let (d_q, d_t) = match variant {
        Variant::Coca => {
            let g = coca_scores_backward(&trace.q_raw, &trace.q_rot, &trace.keys, &d_scores, params.score_scale)?;
            let mut d_q = apply_inverse_rotation(&g.q_rot, table, 0)?;
            for (a, b) in d_q.data.iter_mut().zip(&g.q_raw.data) {
                *a += *b;
            }
            let d_folded = apply_inverse_rotation(&g.t_rot, table, 0)?;
            let folded = trace.folded.as_ref().expect("coca trace carries folded coefficients");
            (d_q, fold_relu_t_backward(folded, &d_folded))
        }
        Variant::Baseline => {
            let mut d_qrot = HeadTensor::zeros(seq, heads, hd);
            let mut d_krot = HeadTensor::zeros(seq, heads, hd);
            let inv = T::of(1.0 / params.score_scale);
            for h in 0..heads {
                T::gemm(
                    seq,
                    seq,
                    hd,
                    inv,
                    d_scores.head(h),
                    seq as isize,
                    1,
                    &trace.keys.data[h * hd..],
                    dm as isize,
                    1,
                    T::zero(),
                    &mut d_qrot.data[h * hd..],
                    dm as isize,
                    1,
                );
                T::gemm(
                    seq,
                    seq,
                    hd,
                    inv,
                    d_scores.head(h),
                    1,
                    seq as isize,
                    &trace.q_rot.data[h * hd..],
                    dm as isize,
                    1,
                    T::zero(),
                    &mut d_krot.data[h * hd..],
                    dm as isize,
                    1,
                );
            }
            (apply_inverse_rotation(&d_qrot, table, 0)?, apply_inverse_rotation(&d_krot, table, 0)?)
        }
    };

    let mut dx = vec![T::zero(); seq * dm];
    for (w, dw, g) in [
        (&params.w_q, &mut grads.w_q, &d_q.data),
        (&params.w_t, &mut grads.w_t, &d_t.data),
        (&params.w_v, &mut grads.w_v, &d_v.data),
    ] {
        matmul_at(&trace.x, g, dw, dm, seq, dm, true);
        matmul_bt(g, w, &mut dx, seq, dm, dm, true);
    }
    Ok(dx)
}
