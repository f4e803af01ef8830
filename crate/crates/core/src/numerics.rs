//! Dense row-major matrices, stable reductions, probability transforms and a
//! seeded, splittable random stream.
//!
//! Everything is `f64`. Moment-matching kernels raise inner products to the
//! q-th power and single precision loses the tensor/kernel equality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Floor applied to every argument of `ln` in losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` for a [`ProbVector`].
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return dim_err(format!("row {i} has {} entries, expected {cols}", r.len()));
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
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

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return dim_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return dim_err(format!(
                "t_matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b_row = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return dim_err(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return dim_err(format!("add {:?} and {:?}", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.iter_rows().map(pairwise_sum).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise (cascade) summation; error grows as O(log n · ε).
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if v.len() <= BLOCK {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

/// Neumaier-compensated summation, the reference for reduction accuracy.
pub fn compensated_sum(v: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in v {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln` of `x` clamped into `[LOG_FLOOR, 1]`.
pub fn clamped_ln(x: f64) -> f64 {
    clamped_ln_at(x, LOG_FLOOR)
}

/// Derivative of [`clamped_ln`]; zero where the clamp is active.
pub fn clamped_ln_grad(x: f64) -> f64 {
    clamped_ln_grad_at(x, LOG_FLOOR)
}

/// `ln` of `x` clamped into `[floor, 1]`.
pub fn clamped_ln_at(x: f64, floor: f64) -> f64 {
    x.clamp(floor, 1.0).ln()
}

pub fn clamped_ln_grad_at(x: f64, floor: f64) -> f64 {
    if (floor..=1.0).contains(&x) {
        1.0 / x
    } else {
        0.0
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return dim_err("empty probability vector");
        }
        if let Some(bad) = values
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::Domain(format!(
                "probability entry {bad} outside [0,1]"
            )));
        }
        let total = compensated_sum(values.iter().copied());
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("probabilities sum to {total}")));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Result<Self> {
        if k >= n {
            return dim_err(format!("one-hot index {k} out of {n}"));
        }
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<ProbVector> {
    if v.is_empty() {
        return dim_err("softmax of empty vector");
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("softmax input not finite".into()));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(ProbVector(out))
}

/// Unchecked softmax kernel used on hot paths; `out.len() == v.len()`.
pub fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(bad) = p.iter().find(|x| **x < 0.0 || !x.is_finite()) {
        return Err(Error::Domain(format!("entropy of negative entry {bad}")));
    }
    Ok(-p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

/// `−Σ target_i ln pred_i` with the log argument clamped. `pred` need not sum to one.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return dim_err(format!(
            "cross entropy target {} vs prediction {}",
            target.len(),
            pred.len()
        ));
    }
    Ok(-target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| t * clamped_ln(*p))
        .sum::<f64>())
}

/// Reproducible random source. Sub-streams are derived by label so that, for
/// example, data sampling and weight initialisation never share draws.
#[derive(Clone, Debug)]
pub struct SeededStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `(this stream, purpose)`. Does not advance `self`.
    pub fn substream(&self, purpose: &str) -> SeededStream {
        let mut h = fnv1a(0xcbf2_9ce4_8422_2325, &self.stream_id.to_le_bytes());
        h = fnv1a(h, purpose.as_bytes());
        Self::with_stream(self.seed, h)
    }

    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn random_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.uniform_in(lo, hi)).collect();
        Matrix { rows, cols, data }
    }
}

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(p.as_slice().iter().all(|x| close(*x, 1.0 / 3.0, 1e-15)));

        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (x, want) in p.as_slice().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!(close(*x, want, 1e-15));
        }

        let v = [0.3, -1.2, 4.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
        let a = softmax(&v).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!(close(*x, *y, 1e-14));
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_extreme_inputs_stay_on_simplex() {
        let p = softmax(&[1e300, -1e300, 0.0]).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn entropy_examples() {
        assert!(close(entropy(&[0.25; 4]).unwrap(), 4f64.ln(), 1e-12));
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(close(entropy(&[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-12));
        assert!(matches!(entropy(&[1.5, -0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(
            cross_entropy(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0])
                .unwrap()
                .abs()
                < 1e-12
        );
        assert!(close(
            cross_entropy(&[1.0, 0.0], &[0.5, 0.25]).unwrap(),
            2f64.ln(),
            1e-12
        ));
        assert!(close(
            cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap(),
            2f64.ln(),
            1e-12
        ));
        assert!(matches!(
            cross_entropy(&[1.0], &[0.5, 0.5]),
            Err(Error::Dimension(_))
        ));
        // a zero prediction is clamped, not infinite
        let ce = cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!(close(ce, -LOG_FLOOR.ln(), 1e-9));
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.2, 0.8]).is_ok());
        assert!(ProbVector::new(vec![0.2, 0.7]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }

    #[test]
    fn stream_determinism() {
        let a = SeededStream::new(7).uniform(32);
        let b = SeededStream::new(7).uniform(32);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| (0.0..1.0).contains(x)));
        assert!(SeededStream::new(7).uniform(0).is_empty());

        let c = SeededStream::new(8).uniform(16);
        assert_ne!(&a[..16], &c[..]);
    }

    #[test]
    fn substreams_are_independent_of_parent_draws() {
        let mut parent = SeededStream::new(3);
        let before = parent.substream("init").uniform(8);
        parent.uniform(100);
        let after = parent.substream("init").uniform(8);
        assert_eq!(before, after);
        assert_ne!(before, parent.substream("data").uniform(8));
    }

    #[test]
    fn matmul_variants_agree() {
        let mut s = SeededStream::new(1);
        let a = s.random_matrix(3, 4, -1.0, 1.0);
        let b = s.random_matrix(4, 2, -1.0, 1.0);
        let ab = a.matmul(&b).unwrap();
        let ab2 = a.transpose().t_matmul(&b).unwrap();
        let ab3 = a.matmul_t(&b.transpose()).unwrap();
        for ((x, y), z) in ab.as_slice().iter().zip(ab2.as_slice()).zip(ab3.as_slice()) {
            assert!(close(*x, *y, 1e-14) && close(*x, *z, 1e-14));
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn pairwise_sum_matches_compensated_reference() {
        let mut s = SeededStream::new(11);
        let v: Vec<f64> = (0..1_000_000).map(|_| s.uniform_in(-1.0, 3.0)).collect();
        let reference = compensated_sum(v.iter().copied());
        let got = pairwise_sum(&v);
        assert!((got - reference).abs() <= 1e-9 * reference.abs());
    }
}
