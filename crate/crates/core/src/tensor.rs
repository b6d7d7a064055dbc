use crate::error::{bail, Result};
use crate::real::Real;

/// Per-head activations laid out `[seq x heads x head_dim]`, row-major.
///
/// A `[seq x d_model]` projection output is already in this layout when
/// `d_model = heads * head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor<T> {
    pub data: Vec<T>,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Real> HeadTensor<T> {
    pub fn zeros(seq: usize, heads: usize, head_dim: usize) -> Self {
        Self { data: vec![T::zero(); seq * heads * head_dim], seq, heads, head_dim }
    }

    pub fn from_vec(data: Vec<T>, seq: usize, heads: usize, head_dim: usize) -> Result<Self> {
        if data.len() != seq * heads * head_dim {
            bail!(Dimension, "buffer of {} elements does not match [{seq} x {heads} x {head_dim}]", data.len());
        }
        Ok(Self { data, seq, heads, head_dim })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    #[inline]
    pub fn idx(&self, pos: usize, head: usize, dim: usize) -> usize {
        (pos * self.heads + head) * self.head_dim + dim
    }

    #[inline]
    pub fn get(&self, pos: usize, head: usize, dim: usize) -> T {
        self.data[self.idx(pos, head, dim)]
    }

    pub fn vector(&self, pos: usize, head: usize) -> &[T] {
        let start = self.idx(pos, head, 0);
        &self.data[start..start + self.head_dim]
    }

    pub fn vector_mut(&mut self, pos: usize, head: usize) -> &mut [T] {
        let start = self.idx(pos, head, 0);
        let d = self.head_dim;
        &mut self.data[start..start + d]
    }

    /// Appends the rows of `other` after the rows of `self`.
    pub fn concat_rows(&self, other: &Self) -> Result<Self> {
        if self.heads != other.heads || self.head_dim != other.head_dim {
            bail!(
                Dimension,
                "cannot stack [.. x {} x {}] onto [.. x {} x {}]",
                other.heads,
                other.head_dim,
                self.heads,
                self.head_dim
            );
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self { data, seq: self.seq + other.seq, heads: self.heads, head_dim: self.head_dim })
    }

    pub fn cast<U: Real>(&self) -> HeadTensor<U> {
        HeadTensor {
            data: crate::real::cast_slice(&self.data),
            seq: self.seq,
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }
}

/// Attention scores or probabilities laid out `[heads x sq x sk]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor<T> {
    pub data: Vec<T>,
    pub heads: usize,
    pub sq: usize,
    pub sk: usize,
}

impl<T: Real> ScoreTensor<T> {
    pub fn zeros(heads: usize, sq: usize, sk: usize) -> Self {
        Self { data: vec![T::zero(); heads * sq * sk], heads, sq, sk }
    }

    #[inline]
    pub fn get(&self, head: usize, m: usize, n: usize) -> T {
        self.data[(head * self.sq + m) * self.sk + n]
    }

    pub fn row(&self, head: usize, m: usize) -> &[T] {
        let start = (head * self.sq + m) * self.sk;
        &self.data[start..start + self.sk]
    }

    pub fn head(&self, head: usize) -> &[T] {
        let len = self.sq * self.sk;
        &self.data[head * len..(head + 1) * len]
    }
}
