//! Minimal dense linear algebra, deterministic RNG, and selection primitives.
//!
//! All math runs in f64; file formats downcast to f32 at the IO boundary.
//! Every operation here is a pure function on immutable inputs. The parallel
//! paths write disjoint output rows, so results are bitwise identical for any
//! thread count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("data length {got} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("vector has near-zero norm")]
    ZeroVector,
    #[error("need at least {need} rows, got {got}")]
    NotEnoughRows { need: usize, got: usize },
    #[error("requested {requested} components but matrix has {cols} columns")]
    TooManyComponents { requested: usize, cols: usize },
}

/// Row-major dense matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, checking shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadShape { rows, cols, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Builds a matrix by stacking rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch(format!(
                    "row length {} != {}",
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Column means; requires at least one row.
    pub fn column_mean(&self) -> Result<DenseVector, NumericsError> {
        if self.rows == 0 {
            return Err(NumericsError::NotEnoughRows { need: 1, got: 0 });
        }
        let mut mean = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        for m in &mut mean {
            *m /= n;
        }
        DenseVector::new(mean)
    }
}

/// Dense f64 vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self, NumericsError> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
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

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.data
    }
}

/// Deterministic, platform-independent random stream (ChaCha8 keyed by seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "u64", into = "u64")]
pub struct SeededRng {
    seed: u64,
    #[serde(skip)]
    stream: ChaCha8Rng,
}

impl From<u64> for SeededRng {
    fn from(seed: u64) -> Self {
        Self::new(seed)
    }
}

impl From<SeededRng> for u64 {
    fn from(r: SeededRng) -> Self {
        r.seed
    }
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.stream.gen::<f64>()
    }

    /// Standard normal draw (Box-Muller on the uniform stream).
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = loop {
            let u = self.stream.gen::<f64>();
            if u > 0.0 {
                break u;
            }
        };
        let u2: f64 = self.stream.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.normal()).collect()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.stream.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.stream.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Samples `k` distinct indices from [0, n), returned sorted ascending.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        let mut picked: Vec<usize> = idx.into_iter().take(k).collect();
        picked.sort_unstable();
        picked
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Row count above which matmul parallelizes over output rows.
const PAR_ROW_THRESHOLD: usize = 64;

/// Standard matrix product. Accumulation order within each output row is
/// fixed (k-major), and rows are written independently, so the parallel path
/// is bitwise identical to the serial one for any thread count.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::DimensionMismatch(format!(
            "matmul: lhs is {}x{}, rhs is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    let n = b.cols;
    let kd = a.cols;
    let mul_row = |i: usize, out_row: &mut [f64]| {
        let a_row = a.row(i);
        for k in 0..kd {
            let aik = a_row[k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    };
    if a.rows >= PAR_ROW_THRESHOLD {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| mul_row(i, row));
    } else {
        for (i, row) in out.data.chunks_mut(n).enumerate() {
            mul_row(i, row);
        }
    }
    Ok(out)
}

/// Normalizes to unit L2 norm; direction is preserved.
pub fn l2_normalize(v: &DenseVector) -> Result<DenseVector, NumericsError> {
    let n = v.norm();
    if n < 1e-12 {
        return Err(NumericsError::ZeroVector);
    }
    Ok(DenseVector { data: v.data.iter().map(|x| x / n).collect() })
}

/// Indices of the `k` largest entries, in descending-value order with ties
/// broken by the lower index. Returns all indices (same ordering) when
/// `k >= len`.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let n = values.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let better = |&x: &usize, &y: &usize| {
        values[y]
            .partial_cmp(&values[x])
            .expect("non-finite value in top_k_indices")
            .then_with(|| x.cmp(&y))
    };
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, better);
        idx.truncate(k);
    }
    idx.sort_unstable_by(better);
    idx
}

/// Output of [`principal_components`].
#[derive(Debug, Clone)]
pub struct PcaResult {
    /// Column mean of the input.
    pub mean: DenseVector,
    /// One orthonormal component per row (`found` x d), leading first.
    pub components: DenseMatrix,
    /// Variance along each returned component.
    pub eigenvalues: Vec<f64>,
    /// True when the covariance rank was below the requested count; in that
    /// case `components` holds only the directions that exist.
    pub degenerate: bool,
}

const PCA_TOLERANCE: f64 = 1e-8;
const PCA_MAX_ITERATIONS: usize = 20_000;
const PCA_SEED: u64 = 0x5eed_9c4a;

/// Top principal components of the centered covariance, by deterministic
/// power iteration with deflation (fixed internal seed, tolerance 1e-8).
/// Sign convention: first coordinate of magnitude > 1e-9 is positive.
pub fn principal_components(x: &DenseMatrix, d_pc: usize) -> Result<PcaResult, NumericsError> {
    if x.rows < 2 {
        return Err(NumericsError::NotEnoughRows { need: 2, got: x.rows });
    }
    if d_pc > x.cols {
        return Err(NumericsError::TooManyComponents { requested: d_pc, cols: x.cols });
    }
    let d = x.cols;
    let mean = x.column_mean()?;
    let mut centered = x.clone();
    for r in 0..centered.rows {
        let row = centered.row_mut(r);
        for (v, m) in row.iter_mut().zip(mean.data()) {
            *v -= m;
        }
    }
    // d x d covariance; (n - 1) denominator.
    let cov = {
        let mut c = matmul(&centered.transpose(), &centered)?;
        let inv = 1.0 / (x.rows as f64 - 1.0);
        for v in &mut c.data {
            *v *= inv;
        }
        c
    };

    let mut rng = SeededRng::new(PCA_SEED);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(d_pc);
    let mut eigenvalues = Vec::with_capacity(d_pc);
    let mut degenerate = false;

    'comps: for _ in 0..d_pc {
        let mut v = rng.normal_vec(d);
        orthogonalize(&mut v, &components);
        let n = l2_norm(&v);
        if n < 1e-12 {
            degenerate = true;
            break;
        }
        v.iter_mut().for_each(|x| *x /= n);

        for _ in 0..PCA_MAX_ITERATIONS {
            let mut w = vec![0.0; d];
            for i in 0..d {
                w[i] = dot(&cov.data[i * d..(i + 1) * d], &v);
            }
            orthogonalize(&mut w, &components);
            let nw = l2_norm(&w);
            if nw < 1e-12 {
                // No variance left orthogonal to what we already found.
                degenerate = true;
                break 'comps;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let delta: f64 = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = w;
            if delta < PCA_TOLERANCE {
                break;
            }
        }
        fix_sign(&mut v);
        let mut cv = vec![0.0; d];
        for i in 0..d {
            cv[i] = dot(&cov.data[i * d..(i + 1) * d], &v);
        }
        let lambda = dot(&cv, &v);
        if lambda.abs() < 1e-12 {
            degenerate = true;
            break;
        }
        eigenvalues.push(lambda);
        components.push(v);
    }

    let found = components.len();
    let comp_matrix = DenseMatrix::from_rows(&components)
        .unwrap_or_else(|_| DenseMatrix::zeros(found, d));
    Ok(PcaResult { mean, components: comp_matrix, eigenvalues, degenerate })
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let proj = dot(v, b);
        for (vi, bi) in v.iter_mut().zip(b) {
            *vi -= proj * bi;
        }
    }
}

fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}
