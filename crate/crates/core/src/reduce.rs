//! Fixed-order compensated reductions.
//!
//! Every double sum in the crate goes through these helpers. Items are split
//! into chunks of [`CHUNK`] consecutive indices; each chunk is summed in index
//! order with Neumaier compensation, and chunk partials are combined in chunk
//! order. The chunking does not depend on the rayon pool size, so results are
//! bit-identical for any thread count.

use rayon::prelude::*;

pub const CHUNK: usize = 256;

/// Neumaier (improved Kahan–Babuška) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Array of independent compensated accumulators.
#[derive(Debug, Clone, Copy)]
pub struct NeumaierArray<const K: usize> {
    acc: [Neumaier; K],
}

impl<const K: usize> Default for NeumaierArray<K> {
    fn default() -> Self {
        Self {
            acc: [Neumaier::default(); K],
        }
    }
}

impl<const K: usize> NeumaierArray<K> {
    #[inline]
    pub fn add(&mut self, x: &[f64; K]) {
        for (a, v) in self.acc.iter_mut().zip(x) {
            a.add(*v);
        }
    }

    pub fn value(&self) -> [f64; K] {
        let mut out = [0.0; K];
        for (o, a) in out.iter_mut().zip(&self.acc) {
            *o = a.value();
        }
        out
    }
}

/// Deterministic sum of `f(i)` for `i in 0..len`.
pub fn sum<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Neumaier::new();
            for i in c * CHUNK..((c + 1) * CHUNK).min(len) {
                acc.add(f(i));
            }
            acc.value()
        })
        .collect();
    let mut acc = Neumaier::new();
    for p in partials {
        acc.add(p);
    }
    acc.value()
}

/// Deterministic componentwise sum of `f(i)` for `i in 0..len`.
pub fn sum_array<const K: usize, F>(len: usize, f: F) -> [f64; K]
where
    F: Fn(usize) -> [f64; K] + Sync,
{
    let partials: Vec<[f64; K]> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = NeumaierArray::<K>::default();
            for i in c * CHUNK..((c + 1) * CHUNK).min(len) {
                acc.add(&f(i));
            }
            acc.value()
        })
        .collect();
    let mut acc = NeumaierArray::<K>::default();
    for p in &partials {
        acc.add(p);
    }
    acc.value()
}

/// Compensated dot product in index order (sequential).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum(a.len(), |i| a[i] * b[i])
}
