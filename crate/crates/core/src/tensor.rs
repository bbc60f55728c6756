//! Small dense linear algebra in `f64`, seeded sampling and a central
//! finite-difference gradient helper.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), a counter-based stream
//! cipher whose output is specified bit-for-bit, so a given [`RngSeed`]
//! produces the same samples on every platform. Named sub-streams are derived
//! with [`RngSeed::derive`] (FNV-1a over the label, folded through SplitMix64).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The generator used everywhere in the crate.
pub type SeededRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> SeededRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for the sub-stream called `label`.
    pub fn derive(self, label: &str) -> RngSeed {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        RngSeed(splitmix64(self.0 ^ h))
    }

    /// Child seed for the `index`-th member of a family (per layer, per adapter, ...).
    pub fn derive_index(self, label: &str, index: u64) -> RngSeed {
        let base = self.derive(label);
        RngSeed(splitmix64(base.0 ^ splitmix64(index.wrapping_add(1))))
    }
}

impl fmt::Display for RngSeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Row-major dense matrix. Vectors are `1 × n` or `n × 1` matrices.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            if i > 0 {
                write!(f, "; ")?;
            }
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:.6}")).collect();
            write!(f, "{}", row.join(", "))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {n_cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: n_rows, cols: n_cols, data })
    }

    /// Column vector (`n × 1`).
    pub fn col_vector(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    /// Row vector (`1 × n`).
    pub fn row_vector(values: &[f64]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_vector(&self) -> bool {
        self.rows == 1 || self.cols == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v` for a plain slice `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "cannot apply {}x{} to a vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v` without materialising the transpose.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::Shape(format!(
                "cannot apply ({}x{})ᵀ to a vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot {op} {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "subtract", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise absolute difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        (self.shape() == other.shape()).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// `r × d` matrix with orthonormal rows: modified Gram–Schmidt (two passes)
/// over the rows of a standard Gaussian matrix.
pub fn random_orthonormal_rows(r: usize, d: usize, seed: RngSeed) -> Result<Matrix> {
    if r > d {
        return Err(Error::Rank { rank: r, limit: d });
    }
    let mut rng = seed.rng();
    loop {
        let mut m = Matrix::gaussian(r, d, 1.0, &mut rng);
        if orthonormalize_rows(&mut m) {
            return Ok(m);
        }
    }
}

/// Returns false if a row collapsed to (numerically) zero.
fn orthonormalize_rows(m: &mut Matrix) -> bool {
    let (r, d) = m.shape();
    for i in 0..r {
        for _pass in 0..2 {
            for j in 0..i {
                let (head, tail) = m.data.split_at_mut(i * d);
                let prev = &head[j * d..(j + 1) * d];
                let row = &mut tail[..d];
                let proj = dot(row, prev);
                for (x, p) in row.iter_mut().zip(prev) {
                    *x -= proj * p;
                }
            }
        }
        let row = m.row_mut(i);
        let norm = dot(row, row).sqrt();
        if norm < 1e-10 {
            return false;
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    true
}

/// Entries i.i.d. uniform on `[-√(6/cols), √(6/cols)]` (fan-in = `cols`).
pub fn kaiming_uniform(rows: usize, cols: usize, seed: RngSeed) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("kaiming init needs non-empty shape, got {rows}x{cols}")));
    }
    let bound = (6.0 / cols as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
    let mut rng = seed.rng();
    let data = (0..rows * cols).map(|_| rng.sample(dist)).collect();
    Matrix::new(rows, cols, data)
}

/// `(‖v‖₁, ‖v‖₂)` of a row or column vector.
pub fn norms(v: &Matrix) -> Result<(f64, f64)> {
    if !v.is_vector() {
        return Err(Error::Shape(format!("norms need a vector, got {}x{}", v.rows, v.cols)));
    }
    let l1 = v.data.iter().map(|x| x.abs()).sum();
    let l2 = dot(&v.data, &v.data).sqrt();
    Ok((l1, l2))
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Central-difference gradient of a scalar function, one entry at a time.
pub fn finite_difference_grad<F>(f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Range(format!("step size must be positive, got {h}")));
    }
    let mut grad = Matrix::zeros(x.rows, x.cols);
    let mut probe = x.clone();
    for idx in 0..x.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + h;
        let up = f(&probe);
        probe.data[idx] = orig - h;
        let down = f(&probe);
        probe.data[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective not finite near entry {idx}")));
        }
        grad.data[idx] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let mut rng = RngSeed(3).rng();
        let m = Matrix::gaussian(3, 4, 1.0, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[[2.0], [4.0]]).unwrap());
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = RngSeed(11).rng();
        let a = Matrix::gaussian(5, 7, 1.0, &mut rng);
        let b = Matrix::gaussian(7, 3, 1.0, &mut rng);
        let diff = a.matmul(&b).unwrap().max_abs_diff(&naive(&a, &b)).unwrap();
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn product_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&Matrix::zeros(2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn orthonormal_rows_unit() {
        let m = random_orthonormal_rows(1, 1, RngSeed(5)).unwrap();
        assert!((m.get(0, 0).abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_rows_gram_is_identity() {
        let b = random_orthonormal_rows(4, 16, RngSeed(9)).unwrap();
        let gram = b.matmul(&b.transpose()).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(4)).unwrap() <= 1e-9);
    }

    #[test]
    fn orthonormal_rows_deterministic() {
        let a = random_orthonormal_rows(6, 10, RngSeed(77)).unwrap();
        let b = random_orthonormal_rows(6, 10, RngSeed(77)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(matches!(random_orthonormal_rows(5, 4, RngSeed(1)), Err(Error::Rank { .. })));
    }

    #[test]
    fn kaiming_bounds_and_mean() {
        let m = kaiming_uniform(50, 6, RngSeed(2)).unwrap();
        assert!(m.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let big = kaiming_uniform(100_000 / 24 + 1, 24, RngSeed(4)).unwrap();
        let mean = big.data().iter().sum::<f64>() / big.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert_eq!(kaiming_uniform(3, 3, RngSeed(1)).unwrap(), kaiming_uniform(3, 3, RngSeed(1)).unwrap());
    }

    #[test]
    fn norm_cases() {
        assert_eq!(norms(&Matrix::row_vector(&[3.0, 4.0])).unwrap(), (7.0, 5.0));
        assert_eq!(norms(&Matrix::col_vector(&[0.0, 0.0, 0.0])).unwrap(), (0.0, 0.0));
        assert_eq!(norms(&Matrix::row_vector(&[1.0; 4])).unwrap(), (4.0, 2.0));
        assert!(matches!(norms(&Matrix::zeros(2, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn finite_differences() {
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let g = finite_difference_grad(|m| m.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 2.0).abs() < 1e-6 && (g.get(0, 1) - 4.0).abs() < 1e-6);

        let c = finite_difference_grad(|_| 3.5, &x, 1e-5).unwrap();
        assert_eq!(c.max_abs(), 0.0);

        assert!(matches!(finite_difference_grad(|_| f64::NAN, &x, 1e-5), Err(Error::Numeric(_))));
        assert!(finite_difference_grad(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s = RngSeed(1);
        assert_ne!(s.derive("a"), s.derive("b"));
        assert_ne!(s.derive_index("layer", 0), s.derive_index("layer", 1));
        assert_eq!(s.derive("a"), RngSeed(1).derive("a"));
    }
}
