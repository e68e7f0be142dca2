//! Small shared numeric kernels: stabilized softmax/log-softmax, row
//! normalization with its backward pass, and deterministic seed derivation.

use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// log(Σ exp(x_i)) with max subtraction. Returns -inf on an empty slice.
pub fn logsumexp(xs: ArrayView1<f64>) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Row-wise softmax(x / temp), max-subtracted per row.
pub fn row_softmax(x: &Array2<f64>, temp: f64) -> Array2<f64> {
    let mut out = x / temp;
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log softmax(x / temp); never materializes probabilities before
/// taking the log, so exact zeros cannot poison it.
pub fn row_log_softmax(x: &Array2<f64>, temp: f64) -> Array2<f64> {
    let mut out = x / temp;
    for mut row in out.rows_mut() {
        let lse = logsumexp(row.view());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise ℓ2 normalization. An exactly-zero row stays zero.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// Backward pass of [`l2_normalize_rows`]: given the unnormalized input `u`
/// and the upstream gradient w.r.t. z = u/|u|, returns the gradient w.r.t. u.
/// Zero rows propagate zero gradient (matching the forward degenerate rule).
pub fn l2_normalize_rows_backward(u: &Array2<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let mut du = Array2::zeros(u.raw_dim());
    for i in 0..u.nrows() {
        let ui = u.row(i);
        let n = ui.dot(&ui).sqrt();
        if n == 0.0 {
            continue;
        }
        let zi = ui.mapv(|v| v / n);
        let gi = dz.row(i);
        let dot = gi.dot(&zi);
        for (j, d) in du.row_mut(i).iter_mut().enumerate() {
            *d = (gi[j] - dot * zi[j]) / n;
        }
    }
    du
}

/// Shannon entropy (nats) of a probability vector; 0·log 0 counts as 0.
pub fn entropy(p: ArrayView1<f64>) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Mean of the rows of a matrix.
pub fn mean_rows(x: &Array2<f64>) -> Array1<f64> {
    let n = x.nrows().max(1) as f64;
    x.sum_axis(ndarray::Axis(0)) / n
}

/// A dense affine map `y = x·W + b` with `W: in×out`, applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Affine {
    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut w = Array2::zeros((in_dim, out_dim));
        for v in w.iter_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.in_dim());
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut AffineGrads) -> Array2<f64> {
        grads.w = &grads.w + &x.t().dot(dy);
        grads.b = &grads.b + &dy.sum_axis(ndarray::Axis(0));
        dy.dot(&self.w.t())
    }
}

/// Gradient accumulator matching an [`Affine`].
#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl AffineGrads {
    pub fn zeros_like(layer: &Affine) -> Self {
        Self {
            w: Array2::zeros(layer.w.raw_dim()),
            b: Array1::zeros(layer.b.raw_dim()),
        }
    }
}

/// splitmix64 step, used to mix seed material.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a role tag plus indices.
/// Every randomized component gets its own stream so adding a consumer never
/// shifts another one's draws.
pub fn derive_seed(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut state = base ^ 0xD6E8FEB86659FD93;
    let mut out = splitmix64(&mut state);
    for b in tag.bytes() {
        state ^= u64::from(b);
        out ^= splitmix64(&mut state);
    }
    for &ix in indices {
        state ^= ix;
        out ^= splitmix64(&mut state);
    }
    out
}

/// Deterministic RNG for a derived seed.
pub fn rng_for(base: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn logsumexp_matches_naive_on_moderate_values() {
        let xs = array![0.3, -1.2, 2.0, 0.0];
        let naive = xs.iter().map(|&x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(xs.view()) - naive).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_survives_large_inputs() {
        let xs = array![1000.0, 1000.0];
        let v = logsumexp(xs.view());
        assert!((v - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = row_softmax(&x, 0.5);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_unit_rows_and_zero_rule() {
        let x = array![[3.0, 4.0], [0.0, 0.0]];
        let z = l2_normalize_rows(&x);
        assert!((z.row(0).dot(&z.row(0)) - 1.0).abs() < 1e-12);
        assert_eq!(z.row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let u = array![[0.4, -1.3, 0.7], [2.0, 0.1, -0.5]];
        let dz = array![[0.3, 0.8, -0.2], [-1.1, 0.5, 0.9]];
        let du = l2_normalize_rows_backward(&u, &dz);
        let h = 1e-6;
        let f = |u: &Array2<f64>| (l2_normalize_rows(u) * &dz).sum();
        for i in 0..u.nrows() {
            for j in 0..u.ncols() {
                let mut up = u.clone();
                let mut um = u.clone();
                up[[i, j]] += h;
                um[[i, j]] -= h;
                let num = (f(&up) - f(&um)) / (2.0 * h);
                assert!(
                    (num - du[[i, j]]).abs() < 1e-6,
                    "({i},{j}): fd {num} vs analytic {}",
                    du[[i, j]]
                );
            }
        }
    }

    #[test]
    fn zero_row_gets_zero_gradient() {
        let u = array![[0.0, 0.0]];
        let dz = array![[1.0, 1.0]];
        let du = l2_normalize_rows_backward(&u, &dz);
        assert_eq!(du, array![[0.0, 0.0]]);
    }

    #[test]
    fn derive_seed_varies_by_tag_and_index() {
        let a = derive_seed(7, "subsample", &[1, 2]);
        let b = derive_seed(7, "subsample", &[1, 3]);
        let c = derive_seed(7, "shuffle", &[1, 2]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "subsample", &[1, 2]));
    }

    #[test]
    fn entropy_of_uniform_is_log_k() {
        let p = Array1::from_elem(8, 1.0 / 8.0);
        assert!((entropy(p.view()) - (8.0f64).ln()).abs() < 1e-12);
    }
}
