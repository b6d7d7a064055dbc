//! Counters for transient tensor elements allocated by the score kernels.
//!
//! Kernels allocate their scratch and output buffers through [`TrackedBuf`],
//! which reports to a thread-local live/peak counter. Inputs owned by the
//! caller are not counted.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Resets the peak to the current live count and returns the previous peak.
pub fn reset_peak() -> usize {
    let live = LIVE.with(Cell::get);
    PEAK.with(|p| p.replace(live))
}

pub fn peak_elems() -> usize {
    PEAK.with(Cell::get)
}

pub fn live_elems() -> usize {
    LIVE.with(Cell::get)
}

fn charge(n: usize) {
    let live = LIVE.with(|l| {
        let v = l.get() + n;
        l.set(v);
        v
    });
    PEAK.with(|p| p.set(p.get().max(live)));
}

fn release(n: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(n)));
}

/// Zero-initialised buffer whose length is charged to the counters while it
/// is alive.
pub struct TrackedBuf<T> {
    data: Vec<T>,
}

impl<T: Clone + Default> TrackedBuf<T> {
    pub fn zeros(len: usize) -> Self {
        charge(len);
        Self { data: vec![T::default(); len] }
    }
}

impl<T> TrackedBuf<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Hands the buffer to the caller; it stops counting as live.
    pub fn into_vec(mut self) -> Vec<T> {
        release(self.data.len());
        std::mem::take(&mut self.data)
    }
}

impl<T> Drop for TrackedBuf<T> {
    fn drop(&mut self) {
        release(self.data.len());
    }
}
