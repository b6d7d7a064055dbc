//! Rotary position tables.
//!
//! Head vectors use the half-split pairing: component `j` of a head vector is
//! the complex number `x[j] + i * x[j + d/2]`, rotated by `p * theta_j` at
//! absolute position `p`. Tables are computed in `f64` and cast to the compute
//! precision when applied.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::HeadTensor;

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotaryTable {
    head_dim: usize,
    base: f64,
    max_pos: usize,
    freqs: Vec<f64>,
    cos_cache: Vec<f64>,
    sin_cache: Vec<f64>,
}

impl RotaryTable {
    /// `theta_j = base^(-2j/d)` for `j < d/2`, cached for positions `0..max_pos`.
    pub fn new(head_dim: usize, base: f64, max_pos: usize) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            bail!(Config, "head_dim must be even and at least 2, got {head_dim}");
        }
        if max_pos == 0 {
            bail!(Config, "max_pos must be positive");
        }
        if !(base > 1.0) || !base.is_finite() {
            bail!(Config, "rotary base must be a finite value above 1, got {base}");
        }
        let d = head_dim as f64;
        let freqs = (0..head_dim / 2).map(|j| base.powf(-2.0 * j as f64 / d)).collect();
        Ok(Self::from_parts(head_dim, base, max_pos, freqs))
    }

    /// Table with explicit frequencies, used by the diagnostics and by tests
    /// that need a zero-angle (identity) table. `base` is reported as 0.
    pub fn from_freqs(freqs: Vec<f64>, max_pos: usize) -> Result<Self> {
        if freqs.is_empty() {
            bail!(Config, "at least one frequency is required");
        }
        if max_pos == 0 {
            bail!(Config, "max_pos must be positive");
        }
        if freqs.iter().any(|f| !f.is_finite()) {
            bail!(Config, "frequencies must be finite");
        }
        Ok(Self::from_parts(freqs.len() * 2, 0.0, max_pos, freqs))
    }

    fn from_parts(head_dim: usize, base: f64, max_pos: usize, freqs: Vec<f64>) -> Self {
        let half = freqs.len();
        let mut cos_cache = Vec::with_capacity(max_pos * half);
        let mut sin_cache = Vec::with_capacity(max_pos * half);
        for p in 0..max_pos {
            for &theta in &freqs {
                let (s, c) = (p as f64 * theta).sin_cos();
                cos_cache.push(c);
                sin_cache.push(s);
            }
        }
        Self { head_dim, base, max_pos, freqs, cos_cache, sin_cache }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_pos(&self) -> usize {
        self.max_pos
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    #[inline]
    pub fn cos(&self, pos: usize, j: usize) -> f64 {
        self.cos_cache[pos * self.freqs.len() + j]
    }

    #[inline]
    pub fn sin(&self, pos: usize, j: usize) -> f64 {
        self.sin_cache[pos * self.freqs.len() + j]
    }

    pub fn cos_row(&self, pos: usize) -> &[f64] {
        let h = self.freqs.len();
        &self.cos_cache[pos * h..(pos + 1) * h]
    }

    pub fn sin_row(&self, pos: usize) -> &[f64] {
        let h = self.freqs.len();
        &self.sin_cache[pos * h..(pos + 1) * h]
    }

    /// Same frequencies, cached out to `max_pos` positions (never shrinks).
    pub fn with_capacity(&self, max_pos: usize) -> Self {
        if max_pos <= self.max_pos {
            return self.clone();
        }
        Self::from_parts(self.head_dim, self.base, max_pos, self.freqs.clone())
    }

    /// Default NTK exponent `d / (d - 2)`; infinite for `d = 2`, where the
    /// rescale degenerates and callers must pass an explicit exponent.
    pub fn default_ntk_exponent(&self) -> f64 {
        let d = self.head_dim as f64;
        d / (d - 2.0)
    }

    fn check_positions(&self, offset: usize, seq: usize) -> Result<()> {
        if offset + seq > self.max_pos {
            bail!(Range, "positions {offset}..{} exceed rotary capacity {}", offset + seq, self.max_pos);
        }
        Ok(())
    }

    fn check_dim(&self, head_dim: usize) -> Result<()> {
        if head_dim != self.head_dim {
            bail!(Dimension, "head_dim {head_dim} does not match rotary table {}", self.head_dim);
        }
        Ok(())
    }
}

/// Rotates every head vector of `x` at absolute position `offset + row`.
pub fn apply_rotation<T: Real>(x: &HeadTensor<T>, table: &RotaryTable, offset: usize) -> Result<HeadTensor<T>> {
    let mut out = x.clone();
    rotate_in_place(&mut out, table, offset, false)?;
    Ok(out)
}

/// Rotation by the negated angle; the transpose of [`apply_rotation`], used
/// to pull gradients back through a rotation.
pub fn apply_inverse_rotation<T: Real>(x: &HeadTensor<T>, table: &RotaryTable, offset: usize) -> Result<HeadTensor<T>> {
    let mut out = x.clone();
    rotate_in_place(&mut out, table, offset, true)?;
    Ok(out)
}

pub fn rotate_in_place<T: Real>(
    x: &mut HeadTensor<T>,
    table: &RotaryTable,
    offset: usize,
    inverse: bool,
) -> Result<()> {
    table.check_dim(x.head_dim)?;
    table.check_positions(offset, x.seq)?;
    let half = x.head_dim / 2;
    for row in 0..x.seq {
        let pos = offset + row;
        let cos: Vec<T> = table.cos_row(pos).iter().map(|&c| T::of(c)).collect();
        let sin: Vec<T> = table.sin_row(pos).iter().map(|&s| if inverse { T::of(-s) } else { T::of(s) }).collect();
        for h in 0..x.heads {
            let v = x.vector_mut(row, h);
            for j in 0..half {
                let (a, b) = (v[j], v[j + half]);
                v[j] = a * cos[j] - b * sin[j];
                v[j + half] = a * sin[j] + b * cos[j];
            }
        }
    }
    Ok(())
}

/// NTK-aware base rescale for evaluating at `target_len` a model trained at
/// `train_len`: `base' = base * kappa^(d/(d-2))` with `kappa = target/train`.
pub fn ntk_rescale(table: &RotaryTable, train_len: usize, target_len: usize) -> Result<RotaryTable> {
    if train_len == 0 {
        bail!(Range, "train_len must be at least 1");
    }
    if target_len < train_len {
        bail!(Range, "target_len {target_len} is shorter than train_len {train_len}");
    }
    let kappa = target_len as f64 / train_len as f64;
    ntk_rescale_kappa(table, kappa, table.default_ntk_exponent(), target_len)
}

/// General form with an explicit scale factor and exponent. The result caches
/// at least `max_pos` positions.
pub fn ntk_rescale_kappa(table: &RotaryTable, kappa: f64, exponent: f64, max_pos: usize) -> Result<RotaryTable> {
    if !(kappa >= 1.0) || !kappa.is_finite() {
        bail!(Range, "NTK scale factor must be finite and at least 1, got {kappa}");
    }
    let max_pos = max_pos.max(table.max_pos);
    if kappa == 1.0 {
        return Ok(table.with_capacity(max_pos));
    }
    if table.base <= 1.0 {
        bail!(Config, "NTK rescale needs a base-derived table");
    }
    if !exponent.is_finite() {
        bail!(Config, "NTK exponent {exponent} is not finite (head_dim {})", table.head_dim);
    }
    RotaryTable::new(table.head_dim, table.base * kappa.powf(exponent), max_pos)
}
