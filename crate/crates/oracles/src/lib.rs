//! Reference implementations that the test suites compare against.
//!
//! Nothing here is shared with the engine: each routine is written in the
//! most direct form available so that agreement with the optimized path
//! means something.

/// Plain `i, j, k` triple loop over row-major f32 data. Accumulation
/// runs over `k` ascending starting from `0.0`.
pub fn naive_matmul(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    assert_eq!(a.len(), n * k);
    assert_eq!(b.len(), k * m);
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0f32;
            for t in 0..k {
                acc += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Singular values by one-sided (Hestenes) Jacobi rotations in f64,
/// sorted descending. Returns `min(rows, cols)` values.
pub fn jacobi_singular_values(data: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols);
    // Work on the orientation with at least as many rows as columns so the
    // column norms carry the singular values.
    let (r, c, mut a): (usize, usize, Vec<f64>) = if rows >= cols {
        (rows, cols, data.iter().map(|&x| x as f64).collect())
    } else {
        let mut t = vec![0.0f64; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = data[i * cols + j] as f64;
            }
        }
        (cols, rows, t)
    };

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..c {
            for q in (p + 1)..c {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..r {
                    let x = a[i * c + p];
                    let y = a[i * c + q];
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                if scale > 0.0 {
                    off = f64::max(off, gamma.abs() / scale);
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..r {
                    let x = a[i * c + p];
                    let y = a[i * c + q];
                    a[i * c + p] = cs * x - sn * y;
                    a[i * c + q] = sn * x + cs * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }

    let mut sv: Vec<f64> = (0..c)
        .map(|j| {
            (0..r)
                .map(|i| a[i * c + j] * a[i * c + j])
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Smallest `r` (1-based) with `sum(σ²[..r]) >= tau * sum(σ²)`, by a plain
/// running sum.
pub fn effective_rank_cumsum(singular_values: &[f64], tau: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let mut running = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        running += s * s;
        if running >= tau * total {
            return i + 1;
        }
    }
    singular_values.len()
}

/// Sebastiano Vigna's splitmix64, written out from the reference C.
pub struct SplitMix64Ref(pub u64);

impl SplitMix64Ref {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// Σ p ln(p/q) in f64 with no special-casing beyond p = 0.
pub fn kl_direct(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Next-token argmax over a full-sequence recompute, used as the cache-free
/// generation reference by the acceptance suite.
pub fn argmax_lowest(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
