//! Scalar kernels shared by every computation path.
//!
//! Cached K/V, recomputed K/V, batched prefill and single-token decode all
//! go through the functions in this module in the same order, which is what
//! makes their outputs bit-identical. Accumulations always run over the
//! shared dimension in ascending index order starting from `0.0`, and no
//! fused multiply-add is used.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

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

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Column block `[start, start + width)` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Probability vector produced by [`softmax`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    probs: Vec<f32>,
}

impl ProbDist {
    /// Validates non-negativity and unit mass (within 1e-6).
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Param(format!("probability {i} is {}", probs[i])));
        }
        let total: f64 = probs.iter().map(|&p| p as f64).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Param(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Dot product, ascending index order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Row vector times matrix: `out[j] = Σ_k x[k]·m[k][j]`, k ascending.
///
/// The `k`-outer loop keeps each `out[j]` on the same accumulation
/// sequence as a naive triple loop, so results match it exactly.
pub fn vecmat(x: &[f32], m: &Matrix) -> Result<Vec<f32>> {
    if x.len() != m.rows {
        return Err(Error::Shape(format!(
            "vector of length {} times {}x{} matrix",
            x.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0f32; m.cols];
    vecmat_into(x, m, &mut out);
    Ok(out)
}

pub(crate) fn vecmat_into(x: &[f32], m: &Matrix, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m.cols);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        let row = m.row(k);
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xk * w;
        }
    }
}

/// Matrix product with the accumulation order documented on [`vecmat`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let (row_in, row_out) = (a.row(i), &mut out.data[i * b.cols..(i + 1) * b.cols]);
        vecmat_into(row_in, b, row_out);
    }
    Ok(out)
}

/// `x / sqrt(mean(x²) + eps) ⊙ gamma`.
pub fn rmsnorm(x: &[f32], gamma: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gamma.len() {
        return Err(Error::Shape(format!(
            "rmsnorm input {} vs gamma {}",
            x.len(),
            gamma.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Empty("rmsnorm input"));
    }
    let mut out = vec![0.0f32; x.len()];
    rmsnorm_into(x, gamma, eps, &mut out);
    Ok(out)
}

pub(crate) fn rmsnorm_into(x: &[f32], gamma: &[f32], eps: f32, out: &mut [f32]) {
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let rms = (ss / x.len() as f32 + eps).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] / rms * gamma[i];
    }
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f32]) -> Result<ProbDist> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Param("non-finite softmax score".into()));
    }
    let mut probs = scores.to_vec();
    softmax_in_place(&mut probs);
    Ok(ProbDist { probs })
}

pub(crate) fn softmax_in_place(xs: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0f64;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    for x in xs.iter_mut() {
        *x = (*x as f64 / sum) as f32;
    }
}

/// `x · sigmoid(x)`.
#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

/// Thin SVD computed in f64.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// Left singular vectors as columns, `rows × k`.
    pub u: DMatrix<f64>,
    /// Right singular vectors as columns, `cols × k`.
    pub v: DMatrix<f64>,
}

/// Singular values of `m`, descending, `min(rows, cols)` of them.
pub fn svd_singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(m)?.singular_values)
}

/// Full thin decomposition, sorted by descending singular value.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::Param("SVD of a non-finite matrix".into()));
    }
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Empty("SVD input"));
    }
    let dm = DMatrix::from_row_iterator(m.rows, m.cols, m.data.iter().map(|&x| x as f64));
    let mut dec = dm.svd(true, true);
    dec.sort_by_singular_values();
    let u = dec
        .u
        .ok_or_else(|| Error::Param("SVD produced no U".into()))?;
    let v_t = dec
        .v_t
        .ok_or_else(|| Error::Param("SVD produced no V".into()))?;
    Ok(Svd {
        singular_values: dec.singular_values.iter().copied().collect(),
        u,
        v: v_t.transpose(),
    })
}

/// `Σ p_i ln(p_i / q_i)` in nats, accumulated in f64. Terms with `p_i = 0`
/// contribute nothing.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "KL over supports {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0f64;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InfiniteDivergence {
                index: i,
                p: pi as f64,
            });
        }
        let (pi, qi) = (pi as f64, qi as f64);
        total += pi * (pi / qi).ln();
    }
    // Rounding can leave a tiny negative sum for near-identical inputs.
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kvdirect_oracles::{jacobi_singular_values, kl_direct, naive_matmul};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(
            r,
            c,
            (0..r * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 3, 4);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let a = Matrix::new(1, 1, vec![2.0]).unwrap();
        let b = Matrix::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 4, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(a.data(), b.data(), 4, 5, 3);
        assert_eq!(got.data(), want.as_slice());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn rmsnorm_examples() {
        let ones = vec![1.0f32; 4];
        assert_eq!(rmsnorm(&ones, &ones, 0.0).unwrap(), ones);
        let out = rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((out[0] as f64 - 0.848_528_137_423_857).abs() < 1e-6);
        assert!((out[1] as f64 - 1.131_370_849_898_476).abs() < 1e-6);
        assert!(rmsnorm(&[1.0], &[1.0, 1.0], 1e-6).is_err());
    }

    #[test]
    fn rmsnorm_scale_invariance_non_power_of_two() {
        let x = [0.3f32, -1.2, 2.5, 0.01, -0.7];
        let g = [1.0f32, 0.5, 2.0, 1.5, -1.0];
        let scaled: Vec<f32> = x.iter().map(|v| v * 7.0).collect();
        let a = rmsnorm(&x, &g, 0.0).unwrap();
        let b = rmsnorm(&scaled, &g, 0.0).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().probs(), &[0.5, 0.5]);
        let p = softmax(&[42.0, 42.0, 42.0]).unwrap();
        for &x in p.probs() {
            assert!((x - 1.0 / 3.0).abs() < 1e-7);
        }
        let p = softmax(&[1f32.ln(), 2f32.ln(), 3f32.ln()]).unwrap();
        for (x, want) in p.probs().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((*x as f64 - want).abs() < 1e-7);
        }
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn svd_examples() {
        let sv = svd_singular_values(&Matrix::identity(4)).unwrap();
        for s in sv {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let u = [1.0f32, -2.0, 0.5];
        let v = [3.0f32, 1.0, 0.0, 2.0];
        let outer: Vec<f32> = u
            .iter()
            .flat_map(|a| v.iter().map(move |b| a * b))
            .collect();
        let sv = svd_singular_values(&Matrix::new(3, 4, outer).unwrap()).unwrap();
        let norm_u = u.iter().map(|x| x * x).sum::<f32>().sqrt() as f64;
        let norm_v = v.iter().map(|x| x * x).sum::<f32>().sqrt() as f64;
        assert_eq!(sv.len(), 3);
        assert!((sv[0] - norm_u * norm_v).abs() < 1e-6);
        assert!(sv[1].abs() < 1e-6 && sv[2].abs() < 1e-6);
    }

    #[test]
    fn svd_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let m = random_matrix(&mut rng, 6, 6);
        let got = svd_singular_values(&m).unwrap();
        let want = jacobi_singular_values(m.data(), 6, 6);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-5 * want[0], "{g} vs {w}");
        }
    }

    #[test]
    fn kl_examples() {
        let p = ProbDist::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let q = ProbDist::new(vec![0.25, 0.75]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 0.143_841_036_225_890_42).abs() < 1e-9);
        let one_hot = ProbDist::new(vec![1.0, 0.0]).unwrap();
        assert!((kl_divergence(&one_hot, &p).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            kl_divergence(&p, &one_hot),
            Err(Error::InfiniteDivergence { index: 1, .. })
        ));
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.gen_range(2..20);
            let a: Vec<f32> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let b: Vec<f32> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let (p, q) = (softmax(&a).unwrap(), softmax(&b).unwrap());
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= 0.0);
            let pd: Vec<f64> = p.probs().iter().map(|&x| x as f64).collect();
            let qd: Vec<f64> = q.probs().iter().map(|&x| x as f64).collect();
            assert!((kl - kl_direct(&pd, &qd).max(0.0)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn matmul_is_bit_deterministic(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, k);
            let b = random_matrix(&mut rng, k, m);
            let first = matmul(&a, &b).unwrap();
            prop_assert_eq!(&first, &matmul(&a, &b).unwrap());
            let oracle = naive_matmul(a.data(), b.data(), n, k, m);
            prop_assert_eq!(first.data(), oracle.as_slice());
        }

        #[test]
        fn rmsnorm_power_of_two_scaling_is_exact(
            x in prop::collection::vec(-10.0f32..10.0, 1..32),
            shift in -8i32..8,
        ) {
            prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
            let gamma = vec![1.0f32; x.len()];
            let alpha = 2f32.powi(shift);
            let scaled: Vec<f32> = x.iter().map(|v| v * alpha).collect();
            prop_assert_eq!(rmsnorm(&x, &gamma, 0.0).unwrap(), rmsnorm(&scaled, &gamma, 0.0).unwrap());
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            ticks in prop::collection::vec(-20_000i32..20_000, 1..64),
            c in -50i32..50,
        ) {
            // Scores on a 1/1024 grid so that adding an integer shift is exact.
            let s: Vec<f32> = ticks.iter().map(|&t| t as f32 / 1024.0).collect();
            let p = softmax(&s).unwrap();
            let total: f64 = p.probs().iter().map(|&x| x as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-7);
            let shifted: Vec<f32> = s.iter().map(|x| x + c as f32).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }

        #[test]
        fn svd_energy_matches_frobenius(seed in any::<u64>(), r in 1usize..8, c in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, r, c);
            let sv = svd_singular_values(&m).unwrap();
            prop_assert_eq!(sv.len(), r.min(c));
            prop_assert!(sv.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(sv.iter().all(|s| *s >= 0.0));
            let energy: f64 = sv.iter().map(|s| s * s).sum();
            let fro = m.frobenius_sq();
            prop_assert!((energy - fro).abs() <= 1e-4 * fro.max(1e-12));
        }
    }
}
