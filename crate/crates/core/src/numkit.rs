//! Dense numeric primitives: row-major matrices, stable softmax and
//! log-sum-exp, and a seeded, platform-independent random source.
//!
//! # Random stream
//!
//! [`Rng`] is xoshiro256++ whose 256-bit state is filled from the 64-bit seed
//! by four successive SplitMix64 outputs. Derived draws are defined as:
//!
//! * `uniform()`: `(next_u64() >> 11) * 2^-53`, a value in `[0, 1)`.
//! * `normal()`: Box-Muller on two uniforms `u1, u2`, using `1 - u1` so the
//!   logarithm argument lies in `(0, 1]`:
//!   `r = sqrt(-2 ln(1 - u1))`, returning `r cos(2 pi u2)` and caching
//!   `r sin(2 pi u2)` for the next call.
//! * `below(n)`: the high 64 bits of the 128-bit product `next_u64() * n`.
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.
//!
//! Identical seeds and call sequences give bit-identical streams on every
//! platform.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{invalid, Result};

pub type Vec64 = Vec<f64>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows.
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `m · x`.
pub fn matvec(m: &Mat64, x: &[f64]) -> Result<Vec64> {
    if m.cols != x.len() {
        return Err(invalid(format!(
            "matvec: matrix has {} columns but vector has length {}",
            m.cols,
            x.len()
        )));
    }
    Ok(m.iter_rows().map(|row| dot(row, x)).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn log_sum_exp(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(invalid("log_sum_exp of an empty vector"));
    }
    let m = max_of(z);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

pub fn softmax(z: &[f64]) -> Result<Vec64> {
    if z.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    let m = max_of(z);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    Ok(out)
}

pub fn log_softmax(z: &[f64]) -> Result<Vec64> {
    let lse = log_sum_exp(z)?;
    Ok(z.iter().map(|&v| v - lse).collect())
}

/// Seeded xoshiro256++ stream; see the module docs for the exact derivations.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `n` independent draws from `N(0, std^2)`.
pub fn rand_normal(rng: &mut Rng, n: usize, std: f64) -> Vec64 {
    (0..n).map(|_| std * rng.normal()).collect()
}
