//! Small deterministic numeric kernel: a row-major matrix, numerically stable
//! elementwise functions, a seedable PRNG and a central-difference gradient
//! oracle.
//!
//! Everything is 64-bit floating point so finite-difference checks against the
//! hand-derived gradients stay meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floor applied before taking the log of a probability.
pub const LOG_FLOOR: f64 = 1e-7;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Allowed deviation of a simplex sum from 1 before it is rejected.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "matrix data".into(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows into a new matrix, in the given order.
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
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
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
        Ok(out)
    }

    /// `self · otherᵀ`, the shape used by dense layers stored as out×in.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} times ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded ChaCha8 stream. Identical seeds replay identical draw sequences.
#[derive(Clone, Debug)]
pub struct Prng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `(seed, tag)`.
    pub fn derive(seed: u64, tag: &str) -> Self {
        Self::new(splitmix64(seed ^ fnv1a64(tag.as_bytes())))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, written out so the draw sequence is pinned here.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// 64-bit FNV-1a, used for stable string-keyed seed derivation and checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn check_simplex(z: &[f64]) -> Result<()> {
    let sum: f64 = z.iter().sum();
    if z.iter().any(|&v| !v.is_finite() || v < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotSimplex { sum });
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax logits".into(),
        });
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked variant for hot loops whose inputs are already known finite.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log(1 + e^x)` with overflow-safe tails.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid; also the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(z: &[f64]) -> Result<f64> {
    check_simplex(z)?;
    Ok(entropy_unchecked(z))
}

pub(crate) fn entropy_unchecked(z: &[f64]) -> f64 {
    -z.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `log(max(p, LOG_FLOOR))` for a probability `p`.
pub fn safe_log(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange {
            what: "probability",
            value: p,
        });
    }
    Ok(p.max(LOG_FLOOR).ln())
}

pub fn draw_categorical(prng: &mut Prng, probs: &[f64]) -> usize {
    let u = prng.uniform();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left u above the cumulative sum: fall back to the last
    // class with nonzero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Central differences `(f(θ + h e_k) − f(θ − h e_k)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        probe[k] = theta[k] + h;
        let up = f(&probe);
        probe[k] = theta[k] - h;
        let down = f(&probe);
        probe[k] = theta[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                context: format!("objective at coordinate {k}"),
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Elementwise relative error `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// coordinates whose true gradient is ~0 from dividing round-off by round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(u.iter().all(|&v| close(v, 1.0 / 3.0, 1e-15)));

        let p = softmax(&[0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()]).unwrap();
        for (got, want) in p.iter().zip([0.5, 0.3, 0.2]) {
            assert!(close(*got, want, 1e-12), "{got} vs {want}");
        }

        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(close(p.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn softplus_examples() {
        assert!(close(softplus(0.0), std::f64::consts::LN_2, 1e-15));
        assert!(close(softplus(100.0), 100.0, 1e-12));
        assert!(close(softplus(1.0), 1.313_261_687_518_223, 1e-12));
        assert!(softplus(-50.0) > 0.0);
        assert!(close(softplus(-40.0), (-40.0f64).exp(), 1e-30));
    }

    #[test]
    fn entropy_examples() {
        let u = [1.0 / 3.0; 3];
        assert!(close(entropy(&u).unwrap(), 3f64.ln(), 1e-12));
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1), term by term
        let want = 0.7 * 0.356_674_943_938_732_4 + 0.2 * 1.609_437_912_434_100_3
            + 0.1 * 2.302_585_092_994_045_7;
        let h = entropy(&[0.7, 0.2, 0.1]).unwrap();
        assert!(close(h, want, 1e-12));
        assert!(close(h, 0.801_819, 1e-6));
        assert!(matches!(
            entropy(&[0.5, 0.4]),
            Err(Error::NotSimplex { .. })
        ));
    }

    #[test]
    fn safe_log_examples() {
        assert_eq!(safe_log(1.0).unwrap(), 0.0);
        assert!(close(safe_log(0.0).unwrap(), -16.118_095_650_958_32, 1e-10));
        assert!(close(safe_log(0.5).unwrap(), -0.693_147_180_559_945, 1e-12));
        assert!(safe_log(1.5).is_err());
        assert!(safe_log(-0.1).is_err());
    }

    #[test]
    fn categorical_one_hot_is_deterministic() {
        let mut prng = Prng::new(3);
        assert!((0..1000).all(|_| draw_categorical(&mut prng, &[0.0, 0.0, 1.0]) == 2));
        assert!((0..1000).all(|_| draw_categorical(&mut prng, &[1.0, 0.0, 0.0]) == 0));
    }

    #[test]
    fn categorical_uniform_frequencies() {
        let n = 100_000;
        let mut prng = Prng::new(11);
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[draw_categorical(&mut prng, &[1.0 / 3.0; 3])] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!(close(freq, 1.0 / 3.0, 0.0046), "freq {freq}");
        }
    }

    #[test]
    fn prng_replay() {
        let a: Vec<u64> = {
            let mut p = Prng::new(42);
            (0..64).map(|_| p.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut p = Prng::new(42);
            (0..64).map(|_| p.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut p = Prng::new(42);
        let first = p.next_u64();
        assert_ne!(first, p.next_u64());
        assert_ne!(
            Prng::derive(42, "train").next_u64(),
            Prng::derive(42, "test").next_u64()
        );
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|t| dot(t, t), &[1.0, 2.0], FD_STEP).unwrap();
        assert!(close(g[0], 2.0, 1e-8) && close(g[1], 4.0, 1e-8));

        let g = finite_diff_grad(|_| 7.0, &[1.0, -3.0, 0.5], FD_STEP).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let g = finite_diff_grad(|t| softplus(t[0]), &[0.0], FD_STEP).unwrap();
        assert!(close(g[0], 0.5, 1e-8));

        assert!(finite_diff_grad(|t| t[0].ln(), &[0.0], FD_STEP).is_err());
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::INFINITY]).is_err());
        let a = Matrix::zeros(2, 3);
        assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
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

    fn random_matrix(prng: &mut Prng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| prng.normal()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..10),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn matmul_matches_triple_loop(seed in any::<u64>(), m in 1usize..=8, k in 1usize..=8, n in 1usize..=8) {
            let mut prng = Prng::new(seed);
            let a = random_matrix(&mut prng, m, k);
            let b = random_matrix(&mut prng, k, n);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let via_t = a.matmul_transposed(&b.transpose()).unwrap();
            for (x, y) in via_t.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn entropy_peaks_only_at_uniform() {
        let mut prng = Prng::new(5);
        let max = 3f64.ln();
        for _ in 0..10_000 {
            let raw: Vec<f64> = (0..3).map(|_| -prng.uniform().max(1e-300).ln()).collect();
            let s: f64 = raw.iter().sum();
            let z: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let h = entropy(&z).unwrap();
            let dist_from_uniform = z.iter().map(|v| (v - 1.0 / 3.0).abs()).fold(0.0, f64::max);
            assert!(h <= max + 1e-12);
            if dist_from_uniform > 1e-3 {
                assert!(h < max, "non-uniform {z:?} reached max entropy");
            }
        }
    }
}
