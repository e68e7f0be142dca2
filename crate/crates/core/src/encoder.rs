//! The shared point-wise MLP backbone, projection head, and the two
//! swapped-reconstruction decoders.
//!
//! Both the geometry branch and the color branch run through a single
//! parameter set — weight sharing is structural, there is exactly one copy
//! of the encoder. The rectified-linear nonlinearity uses subgradient 0 at
//! the kink.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numeric::{l2_normalize_rows, l2_normalize_rows_backward, rng_for, Affine, AffineGrads};

/// One encoder layer: affine map plus optional rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub affine: Affine,
    pub relu: bool,
}

/// The point-wise MLP F(·), widths d_emb → hidden → hidden → d_feat,
/// rectified on all but the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderParams {
    pub fn init(d_emb: usize, hidden: usize, d_feat: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "encoder", &[]);
        let widths = [d_emb, hidden, hidden, d_feat];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| EncoderLayer {
                affine: Affine::init(w[0], w[1], &mut rng),
                relu: i + 2 < widths.len(),
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.affine.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.affine.out_dim())
    }
}

/// Activations retained by a forward pass for the backward pass:
/// the input of every layer plus its pre-activation.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
}

impl EncoderCache {
    /// Smallest |pre-activation| feeding a rectifier; finite-difference
    /// checks use it to stay away from the kink.
    pub fn min_abs_rectifier_input(&self, params: &EncoderParams) -> f64 {
        let mut min = f64::INFINITY;
        for (l, layer) in params.layers.iter().enumerate() {
            if layer.relu {
                for &v in self.preacts[l].iter() {
                    min = min.min(v.abs());
                }
            }
        }
        min
    }
}

/// Forward pass through the MLP.
pub fn encode(e: &Array2<f64>, params: &EncoderParams) -> Result<Array2<f64>> {
    Ok(encode_with_cache(e, params)?.0)
}

/// Forward pass that also returns the activations needed by
/// [`encode_backward`].
pub fn encode_with_cache(e: &Array2<f64>, params: &EncoderParams) -> Result<(Array2<f64>, EncoderCache)> {
    if e.ncols() != params.in_dim() {
        return Err(Error::shape("encode", format!("N×{}", params.in_dim()), format!("{:?}", e.dim())));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut preacts = Vec::with_capacity(params.layers.len());
    let mut x = e.clone();
    for layer in &params.layers {
        inputs.push(x.clone());
        let y = layer.affine.forward(&x);
        preacts.push(y.clone());
        x = if layer.relu { y.mapv(|v| v.max(0.0)) } else { y };
    }
    Ok((x, EncoderCache { inputs, preacts }))
}

/// Backward pass: accumulates per-layer parameter gradients and returns the
/// gradient w.r.t. the embedding input.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    df: &Array2<f64>,
    grads: &mut [AffineGrads],
) -> Array2<f64> {
    assert_eq!(grads.len(), params.layers.len());
    let mut dy = df.clone();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        if layer.relu {
            let pre = &cache.preacts[l];
            ndarray::Zip::from(&mut dy).and(pre).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        dy = layer.affine.backward(&cache.inputs[l], &dy, &mut grads[l]);
    }
    dy
}

/// Affine map to the contrast space followed by row ℓ2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub affine: Affine,
}

impl ProjectionHead {
    pub fn init(d_feat: usize, d_proj: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "projection", &[]);
        Self {
            affine: Affine::init(d_feat, d_proj, &mut rng),
        }
    }

    /// Returns (z, u) where u is the pre-normalization activation.
    pub fn forward(&self, f: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let u = self.affine.forward(f);
        (l2_normalize_rows(&u), u)
    }

    /// Backward through normalization and the affine map; returns df.
    pub fn backward(
        &self,
        f: &Array2<f64>,
        u: &Array2<f64>,
        dz: &Array2<f64>,
        grads: &mut AffineGrads,
    ) -> Array2<f64> {
        let du = l2_normalize_rows_backward(u, dz);
        self.affine.backward(f, &du, grads)
    }
}

/// Swapped-reconstruction decoders. `geo` consumes color features and
/// predicts coordinates; `color` consumes geometry features and predicts
/// colors. Plain affine maps, no output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoders {
    pub geo: Affine,
    pub color: Affine,
}

impl Decoders {
    pub fn init(d_feat: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "decoders", &[]);
        Self {
            geo: Affine::init(d_feat, 3, &mut rng),
            color: Affine::init(d_feat, 3, &mut rng),
        }
    }
}

/// Both branches' backbone features and their normalized projections.
#[derive(Debug, Clone)]
pub struct FeaturePair {
    pub f_geo: Array2<f64>,
    pub f_color: Array2<f64>,
    pub z_geo: Array2<f64>,
    pub z_color: Array2<f64>,
}

/// The swap: geometry features reconstruct colors, color features
/// reconstruct coordinates. Returns (p̂_geo, p̂_color).
pub fn decode(f_geo: &Array2<f64>, f_color: &Array2<f64>, decoders: &Decoders) -> Result<(Array2<f64>, Array2<f64>)> {
    if f_geo.ncols() != decoders.color.in_dim() || f_color.ncols() != decoders.geo.in_dim() {
        return Err(Error::shape(
            "decode",
            format!("N×{}", decoders.geo.in_dim()),
            format!("{:?}/{:?}", f_geo.dim(), f_color.dim()),
        ));
    }
    Ok((decoders.geo.forward(f_color), decoders.color.forward(f_geo)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, "enc-test", &[]);
        let mut x = Array2::zeros((rows, cols));
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        x
    }

    #[test]
    fn identity_layer_with_relu_disabled_passes_through() {
        let params = EncoderParams {
            layers: vec![EncoderLayer {
                affine: Affine {
                    w: Array2::eye(4),
                    b: ndarray::Array1::zeros(4),
                },
                relu: false,
            }],
        };
        let x = random_matrix(3, 4, 0);
        let y = encode(&x, &params).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let params = EncoderParams {
            layers: vec![EncoderLayer {
                affine: Affine {
                    w: Array2::zeros((4, 5)),
                    b: ndarray::Array1::zeros(5),
                },
                relu: true,
            }],
        };
        let y = encode(&random_matrix(6, 4, 1), &params).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_layer_by_layer_oracle() {
        let params = EncoderParams::init(5, 7, 6, 42);
        let x = random_matrix(4, 5, 2);
        let y = encode(&x, &params).unwrap();
        // Independent re-implementation with scalar loops.
        let mut cur: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).to_vec()).collect();
        for layer in &params.layers {
            let mut next = vec![vec![0.0; layer.affine.out_dim()]; cur.len()];
            for (i, row) in cur.iter().enumerate() {
                for j in 0..layer.affine.out_dim() {
                    let mut acc = layer.affine.b[j];
                    for (k, &v) in row.iter().enumerate() {
                        acc += v * layer.affine.w[[k, j]];
                    }
                    next[i][j] = if layer.relu { acc.max(0.0) } else { acc };
                }
            }
            cur = next;
        }
        for i in 0..4 {
            for j in 0..6 {
                assert!((y[[i, j]] - cur[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_is_row_equivariant() {
        let params = EncoderParams::init(5, 8, 6, 3);
        let x = random_matrix(5, 5, 4);
        let y = encode(&x, &params).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = Array2::zeros((5, 5));
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).assign(&x.row(src));
        }
        let yp = encode(&xp, &params).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(yp.row(dst), y.row(src));
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let params = EncoderParams::init(5, 7, 6, 0);
        assert!(encode(&random_matrix(2, 4, 5), &params).is_err());
    }

    #[test]
    fn projection_rows_unit_norm_or_zero() {
        let head = ProjectionHead::init(6, 4, 11);
        let f = random_matrix(8, 6, 6);
        let (z, _) = head.forward(&f);
        for row in z.rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-9 || n == 0.0);
        }
    }

    #[test]
    fn decode_bias_only_for_zero_features() {
        let dec = Decoders::init(6, 12);
        let f = Array2::zeros((5, 6));
        let (pg, pc) = decode(&f, &f, &dec).unwrap();
        for i in 0..5 {
            for d in 0..3 {
                assert_eq!(pg[[i, d]], dec.geo.b[d]);
                assert_eq!(pc[[i, d]], dec.color.b[d]);
            }
        }
    }

    #[test]
    fn decode_matches_matrix_product_oracle_and_is_row_independent() {
        let dec = Decoders::init(6, 13);
        let f = random_matrix(1, 6, 7);
        let (pg, _) = decode(&f, &f, &dec).unwrap();
        for d in 0..3 {
            let mut acc = dec.geo.b[d];
            for k in 0..6 {
                acc += f[[0, k]] * dec.geo.w[[k, d]];
            }
            assert!((pg[[0, d]] - acc).abs() < 1e-12);
        }
        // Identical rows decode identically regardless of batch size.
        let mut big = Array2::zeros((100, 6));
        for mut row in big.rows_mut() {
            row.assign(&f.row(0));
        }
        let (pg_big, _) = decode(&big, &big, &dec).unwrap();
        for i in 0..100 {
            assert_eq!(pg_big.row(i), pg.row(0));
        }
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let params = EncoderParams::init(4, 6, 5, 21);
        let x = random_matrix(3, 4, 8);
        let probe = random_matrix(3, 5, 9);
        let loss = |p: &EncoderParams| (&encode(&x, p).unwrap() * &probe).sum();

        let (_, cache) = encode_with_cache(&x, &params).unwrap();
        let mut grads: Vec<AffineGrads> = params
            .layers
            .iter()
            .map(|l| AffineGrads::zeros_like(&l.affine))
            .collect();
        encode_backward(&params, &cache, &probe, &mut grads);

        let h = 1e-6;
        for l in 0..params.layers.len() {
            let (rows, cols) = params.layers[l].affine.w.dim();
            for i in 0..rows {
                for j in 0..cols {
                    let mut pp = params.clone();
                    let mut pm = params.clone();
                    pp.layers[l].affine.w[[i, j]] += h;
                    pm.layers[l].affine.w[[i, j]] -= h;
                    let num = (loss(&pp) - loss(&pm)) / (2.0 * h);
                    let a = grads[l].w[[i, j]];
                    let denom = a.abs().max(num.abs()).max(1e-8);
                    assert!(
                        ((a - num) / denom).abs() < 1e-4,
                        "layer {l} w[{i},{j}]: {a} vs {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let params = EncoderParams {
            layers: vec![EncoderLayer {
                affine: Affine {
                    w: Array2::eye(2),
                    b: ndarray::Array1::zeros(2),
                },
                relu: true,
            }],
        };
        let x = array![[0.0, -1.0]];
        let (_, cache) = encode_with_cache(&x, &params).unwrap();
        let mut grads = vec![AffineGrads::zeros_like(&params.layers[0].affine)];
        let dx = encode_backward(&params, &cache, &array![[1.0, 1.0]], &mut grads);
        assert_eq!(dx, array![[0.0, 0.0]]);
    }
}
