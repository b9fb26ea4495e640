//! Dense row-major matrices, a portable counter-based generator, and the
//! central finite-difference oracle every gradient in the crate is checked
//! against.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `rows × cols` matrix of `f64`, stored row-major.
///
/// An input sentence is an `m × n` matrix: one row per word, one column per
/// embedding feature. Arithmetic helpers panic on shape mismatch; public
/// entry points that accept user data validate shapes first and report an
/// [`Error::Input`] instead.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Stacks equally long rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::input(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A `1 × n` matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// An `n × 1` matrix.
    pub fn column_vector(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn set_row(&mut self, i: usize, values: &[f64]) {
        self.row_mut(i).copy_from_slice(values);
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Value of the only entry of a `1 × 1` matrix.
    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "not a scalar");
        self.data[0]
    }

    pub fn ensure_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(Error::input(format!(
                "{what}: expected {rows}x{cols}, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    fn assert_same_shape(&self, other: &Matrix, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        self.assert_same_shape(other, "zip_map");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    /// `self += factor * other`, in place.
    pub fn axpy(&mut self, factor: f64, other: &Matrix) {
        self.assert_same_shape(other, "axpy");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    /// `start + t * (end - start)`, entrywise.
    pub fn lerp(start: &Matrix, end: &Matrix, t: f64) -> Matrix {
        start.zip_map(end, |a, b| a + t * (b - a))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: inner dimensions {} and {} differ",
            self.cols, other.rows
        );
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over rows, giving a `1 × cols` matrix.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    /// Per-row sums as a plain vector.
    pub fn row_sums(&self) -> Vec<f64> {
        self.iter_rows().map(|r| r.iter().sum()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.assert_same_shape(other, "max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(k) => Err(Error::numeric(format!(
                "{what}: non-finite entry at ({}, {})",
                k / self.cols.max(1),
                k % self.cols.max(1)
            ))),
        }
    }

    /// Population standard deviation of all entries.
    pub fn std(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let n = self.data.len() as f64;
        let mean = self.sum() / n;
        (self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.iter_rows().map(<[f64]>::to_vec).collect()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.iter_rows() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

/// SplitMix64: a Weyl counter passed through a fixed 64-bit finalizer.
///
/// The `k`-th output depends only on `seed + k * GAMMA`, so streams are
/// identical on every platform. Not cryptographic.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            counter: 0,
            spare_normal: None,
        }
    }

    /// A generator whose stream is a deterministic function of `(seed, stream)`.
    /// Used to give each sentence its own independent stream.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Rng::new(mix64(seed ^ mix64(stream.wrapping_add(GAMMA))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound`. `bound` must be positive.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below(0)");
        // Lemire's multiply-shift; bias is < 2^-64 * bound, irrelevant here.
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via the Box–Muller transform; pairs are cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows × cols` matrix of i.i.d. `N(mean, std²)` draws. `std = 0` yields a
/// constant matrix without consuming randomness.
pub fn sample_gaussian(rng: &mut Rng, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
    assert!(std >= 0.0, "negative standard deviation");
    if std == 0.0 {
        return Matrix::filled(rows, cols, mean);
    }
    Matrix::from_fn(rows, cols, |_, _| mean + std * rng.normal())
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Central finite differences: entry `(i, j)` is
/// `(f(x + h e_ij) - f(x - h e_ij)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::input(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = x.get(i, j);
            probe.set(i, j, orig + h);
            let plus = f(&probe);
            probe.set(i, j, orig - h);
            let minus = f(&probe);
            probe.set(i, j, orig);
            for (value, sign) in [(plus, '+'), (minus, '-')] {
                if !value.is_finite() {
                    return Err(Error::numeric(format!(
                        "function is {value} at probe x {sign} h*e({i},{j})"
                    )));
                }
            }
            grad.set(i, j, (plus - minus) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// Largest entrywise error, relative to the largest entry of `reference`.
pub fn relative_error(candidate: &Matrix, reference: &Matrix) -> f64 {
    let scale = reference.max_abs().max(candidate.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    candidate.max_abs_diff(reference) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn fd_of_sum_is_all_ones() {
        let mut rng = Rng::new(3);
        let x = sample_gaussian(&mut rng, 3, 4, 0.0, 1.0);
        let g = finite_difference_gradient(|m| m.sum(), &x, 1e-4).unwrap();
        assert!(g.max_abs_diff(&Matrix::filled(3, 4, 1.0)) < 1e-9);
    }

    #[test]
    fn fd_of_square() {
        let x = Matrix::new(1, 2, vec![3.0, -1.0]).unwrap();
        let g = finite_difference_gradient(|m| m.get(0, 0).powi(2), &x, 1e-4).unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-6);
        assert_eq!(g.get(0, 1), 0.0);
    }

    #[test]
    fn fd_reports_non_finite_probe() {
        let x = Matrix::zeros(1, 1);
        let err = finite_difference_gradient(|m| 1.0 / (m.get(0, 0) + 1e-4), &x, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref msg) if msg.contains("(0,0)")), "{err}");
        assert!(finite_difference_gradient(|m| m.sum(), &x, 0.0).is_err());
    }

    #[test]
    fn fd_exact_for_affine_maps() {
        let mut rng = Rng::new(11);
        let coeff = sample_gaussian(&mut rng, 4, 3, 0.0, 2.0);
        let x = sample_gaussian(&mut rng, 4, 3, 0.0, 1.0);
        for h in [1e-6, 1e-5, 1e-4, 1e-3, 1e-2] {
            let g = finite_difference_gradient(|m| 0.7 + m.hadamard(&coeff).sum(), &x, h).unwrap();
            assert!(g.max_abs_diff(&coeff) < 1e-9, "h={h}: {}", g.max_abs_diff(&coeff));
        }
    }

    #[test]
    fn arithmetic_matches_naive_loops() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let a = sample_gaussian(&mut rng, 5, 5, 0.0, 1.0);
            let b = sample_gaussian(&mut rng, 5, 5, 0.0, 1.0);
            let s = rng.normal();
            let add = Matrix::from_fn(5, 5, |i, j| a.get(i, j) + b.get(i, j));
            let had = Matrix::from_fn(5, 5, |i, j| a.get(i, j) * b.get(i, j));
            let sc = Matrix::from_fn(5, 5, |i, j| a.get(i, j) * s);
            assert!(a.add(&b).max_abs_diff(&add) <= 1e-12);
            assert!(a.hadamard(&b).max_abs_diff(&had) <= 1e-12);
            assert!(a.scale(s).max_abs_diff(&sc) <= 1e-12);
            assert!(a.matmul(&b).max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        }
    }

    #[test]
    fn gaussian_degenerate_and_deterministic() {
        let mut rng = Rng::new(1);
        assert_eq!(sample_gaussian(&mut rng, 2, 3, 1.5, 0.0), Matrix::filled(2, 3, 1.5));
        let a = sample_gaussian(&mut Rng::new(42), 4, 4, 0.0, 1.0);
        let b = sample_gaussian(&mut Rng::new(42), 4, 4, 0.0, 1.0);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gaussian_moments() {
        let x = sample_gaussian(&mut Rng::new(2024), 1, 100_000, 0.0, 1.0);
        let mean = x.sum() / 1e5;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((x.std() - 1.0).abs() < 0.02, "std {}", x.std());
    }

    #[test]
    fn rng_stream_is_pinned() {
        // First outputs of SplitMix64 seeded with 0: a cross-platform anchor.
        let mut rng = Rng::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        let first: Vec<u64> = {
            let mut r = Rng::new(99);
            (0..1000).map(|_| r.next_u64()).collect()
        };
        let mut r = Rng::new(99);
        assert!(first.iter().all(|&v| v == r.next_u64()));
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::new(8);
        let mut seen = [false; 7];
        for _ in 0..500 {
            seen[rng.below(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
