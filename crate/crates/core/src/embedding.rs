//! Input embeddings: geometry, color, and the weakly positional embedding.
//!
//! Each point is split into its coordinate triple and its RGB triple; both
//! go through their own linear layer into a shared width `d_emb`. The
//! positional embedding maps the scalar squared norm of the coordinates, so
//! identical colors at different radii stay distinguishable once it is added
//! to the color embedding.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numeric::{rng_for, Affine, AffineGrads};

/// The three embedding layers. Widths are consistent by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    /// 3 → d_emb, applied to coordinates.
    pub geo: Affine,
    /// 3 → d_emb, applied to colors. Distinct from `geo` on purpose: each
    /// modality gets its own linear layer.
    pub color: Affine,
    /// 1 → d_emb, applied to the squared coordinate norm.
    pub pos: Affine,
}

impl EmbeddingParams {
    pub fn init(d_emb: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "embedding", &[]);
        Self {
            geo: Affine::init(3, d_emb, &mut rng),
            color: Affine::init(3, d_emb, &mut rng),
            pos: Affine::init(1, d_emb, &mut rng),
        }
    }

    pub fn d_emb(&self) -> usize {
        self.geo.out_dim()
    }
}

/// Gradients for [`EmbeddingParams`].
#[derive(Debug, Clone)]
pub struct EmbeddingGrads {
    pub geo: AffineGrads,
    pub color: AffineGrads,
    pub pos: AffineGrads,
}

impl EmbeddingGrads {
    pub fn zeros_like(params: &EmbeddingParams) -> Self {
        Self {
            geo: AffineGrads::zeros_like(&params.geo),
            color: AffineGrads::zeros_like(&params.color),
            pos: AffineGrads::zeros_like(&params.pos),
        }
    }
}

fn check_width(x: &Array2<f64>, expect: usize, context: &'static str) -> Result<()> {
    if x.ncols() != expect {
        return Err(Error::shape(context, format!("N×{expect}"), format!("{:?}", x.dim())));
    }
    Ok(())
}

/// e_geo = geo01·W_geo + b_geo, row-wise.
pub fn embed_geometry(geo01: &Array2<f64>, params: &EmbeddingParams) -> Result<Array2<f64>> {
    check_width(geo01, params.geo.in_dim(), "embed_geometry")?;
    Ok(params.geo.forward(geo01))
}

/// e_color = color01·W_color + b_color, row-wise.
pub fn embed_color(color01: &Array2<f64>, params: &EmbeddingParams) -> Result<Array2<f64>> {
    check_width(color01, params.color.in_dim(), "embed_color")?;
    Ok(params.color.forward(color01))
}

/// Per-point squared Euclidean norm of the coordinates, as an N×1 column.
pub fn squared_norms(geo01: &Array2<f64>) -> Array2<f64> {
    let n = geo01.nrows();
    let mut s = Array2::zeros((n, 1));
    for (i, row) in geo01.rows().into_iter().enumerate() {
        s[[i, 0]] = row.dot(&row);
    }
    s
}

/// e_pos = ‖p‖²·W_pos + b_pos; the scalar input is the squared norm.
pub fn embed_position(geo01: &Array2<f64>, params: &EmbeddingParams) -> Result<Array2<f64>> {
    check_width(geo01, 3, "embed_position")?;
    Ok(params.pos.forward(&squared_norms(geo01)))
}

/// Backward of [`embed_position`] through the squared norm, returning the
/// gradient w.r.t. the raw coordinates.
pub fn embed_position_backward(
    geo01: &Array2<f64>,
    de_pos: &Array2<f64>,
    params: &EmbeddingParams,
    grads: &mut EmbeddingGrads,
) -> Array2<f64> {
    let s = squared_norms(geo01);
    let ds = params.pos.backward(&s, de_pos, &mut grads.pos);
    // d‖p‖²/dp = 2p
    let mut dgeo = geo01 * 2.0;
    for (i, mut row) in dgeo.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * ds[[i, 0]]);
    }
    dgeo
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn fixed_params(d: usize) -> EmbeddingParams {
        EmbeddingParams::init(d, 99)
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let p = fixed_params(4);
        let x = Array2::zeros((3, 3));
        let e = embed_geometry(&x, &p).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn homogeneity_of_linear_part() {
        let mut p = fixed_params(4);
        p.geo.b.fill(0.0);
        let x = array![[0.1, -0.4, 0.9], [0.0, 0.2, 0.5]];
        let e1 = embed_geometry(&x, &p).unwrap();
        let e2 = embed_geometry(&(&x * 2.0), &p).unwrap();
        for (a, b) in e1.iter().zip(e2.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_matrix_product() {
        let p = fixed_params(4);
        let x = array![[0.3, 0.7, -0.2], [1.0, 0.0, 0.5]];
        let e = embed_color(&x, &p).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = p.color.b[j];
                for k in 0..3 {
                    acc += x[[i, k]] * p.color.w[[k, j]];
                }
                assert!((e[[i, j]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn position_of_origin_is_bias() {
        let p = fixed_params(5);
        let x = array![[0.0, 0.0, 0.0]];
        let e = embed_position(&x, &p).unwrap();
        for j in 0..5 {
            assert_eq!(e[[0, j]], p.pos.b[j]);
        }
    }

    #[test]
    fn squared_norm_is_sum_of_squares() {
        let x = array![[1.0, 2.0, 2.0]];
        assert_eq!(squared_norms(&x)[[0, 0]], 9.0);
    }

    #[test]
    fn position_batch_matches_norm_then_affine_oracle() {
        let p = fixed_params(4);
        let mut rng = rng_for(7, "test", &[]);
        let mut x = Array2::zeros((6, 3));
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let e = embed_position(&x, &p).unwrap();
        for i in 0..6 {
            let s: f64 = (0..3).map(|k| x[[i, k]] * x[[i, k]]).sum();
            for j in 0..4 {
                let want = s * p.pos.w[[0, j]] + p.pos.b[j];
                assert!((e[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let p = fixed_params(4);
        let x = Array2::zeros((2, 5));
        assert!(embed_geometry(&x, &p).is_err());
        assert!(embed_color(&x, &p).is_err());
        assert!(embed_position(&x, &p).is_err());
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let p = fixed_params(3);
        let x = array![[0.2, -0.8, 0.4], [0.9, 0.1, -0.3]];
        // Scalar probe L = Σ v ⊙ e_pos(x); checks weights, bias, and input.
        let v = array![[0.3, -1.0, 0.7], [0.5, 0.2, -0.4]];
        let loss = |params: &EmbeddingParams, x: &Array2<f64>| {
            (&embed_position(x, params).unwrap() * &v).sum()
        };
        let mut grads = EmbeddingGrads::zeros_like(&p);
        let dgeo = embed_position_backward(&x, &v, &p, &mut grads);

        let h = 1e-6;
        let check = |analytic: f64, num: f64| {
            let denom = analytic.abs().max(num.abs()).max(1e-8);
            assert!(
                ((analytic - num) / denom).abs() < 1e-4,
                "analytic {analytic} vs fd {num}"
            );
        };
        for j in 0..3 {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.pos.w[[0, j]] += h;
            pm.pos.w[[0, j]] -= h;
            check(grads.pos.w[[0, j]], (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h));

            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.pos.b[j] += h;
            pm.pos.b[j] -= h;
            check(grads.pos.b[j], (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h));
        }
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                check(dgeo[[i, j]], (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h));
            }
        }
    }
}
