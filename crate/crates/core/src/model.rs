//! The complete trainable model and its paired forward/backward passes.
//!
//! One encoder parameter set serves both branches: the geometry branch sees
//! the geometry embedding, the color branch sees the color embedding plus
//! the positional embedding. The projection head is shared too.

use ndarray::Array2;

use crate::embedding::{
    embed_color, embed_geometry, squared_norms, EmbeddingGrads, EmbeddingParams,
};
use crate::encoder::{
    decode, encode_backward, encode_with_cache, Decoders, EncoderCache, EncoderParams, FeaturePair,
    ProjectionHead,
};
use crate::error::{Error, Result};
use crate::losses::Prototypes;
use crate::numeric::{derive_seed, AffineGrads};

/// Layer widths and the pseudo-class count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub d_emb: usize,
    pub hidden: usize,
    pub d_feat: usize,
    pub d_proj: usize,
    pub num_clusters: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_emb: 32,
            hidden: 64,
            d_feat: 32,
            d_proj: 16,
            num_clusters: 20,
        }
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embed: EmbeddingParams,
    pub encoder: EncoderParams,
    pub proj: ProjectionHead,
    pub decoders: Decoders,
    pub prototypes: Prototypes,
}

impl ModelParams {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        Self {
            dims,
            embed: EmbeddingParams::init(dims.d_emb, derive_seed(seed, "init", &[0])),
            encoder: EncoderParams::init(
                dims.d_emb,
                dims.hidden,
                dims.d_feat,
                derive_seed(seed, "init", &[1]),
            ),
            proj: ProjectionHead::init(dims.d_feat, dims.d_proj, derive_seed(seed, "init", &[2])),
            decoders: Decoders::init(dims.d_feat, derive_seed(seed, "init", &[3])),
            prototypes: Prototypes::init(
                dims.d_proj,
                dims.num_clusters,
                derive_seed(seed, "init", &[4]),
            ),
        }
    }

    /// Named tensors in the fixed serialization order.
    pub fn tensor_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let push2 = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: &str, a: &Array2<f64>| {
            out.push((name.to_string(), vec![a.nrows(), a.ncols()], a.iter().copied().collect()));
        };
        let push1 = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: &str, a: &ndarray::Array1<f64>| {
            out.push((name.to_string(), vec![a.len()], a.to_vec()));
        };
        push2(&mut out, "embed.geo.w", &self.embed.geo.w);
        push1(&mut out, "embed.geo.b", &self.embed.geo.b);
        push2(&mut out, "embed.color.w", &self.embed.color.w);
        push1(&mut out, "embed.color.b", &self.embed.color.b);
        push2(&mut out, "embed.pos.w", &self.embed.pos.w);
        push1(&mut out, "embed.pos.b", &self.embed.pos.b);
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            push2(&mut out, &format!("encoder.{i}.w"), &layer.affine.w);
            push1(&mut out, &format!("encoder.{i}.b"), &layer.affine.b);
        }
        push2(&mut out, "proj.w", &self.proj.affine.w);
        push1(&mut out, "proj.b", &self.proj.affine.b);
        push2(&mut out, "dec.geo.w", &self.decoders.geo.w);
        push1(&mut out, "dec.geo.b", &self.decoders.geo.b);
        push2(&mut out, "dec.color.w", &self.decoders.color.w);
        push1(&mut out, "dec.color.b", &self.decoders.color.b);
        push2(&mut out, "prototypes", &self.prototypes.c);
        out
    }

    /// Mutable flat views of every parameter tensor, in the same order as
    /// [`ModelParams::tensor_entries`]. The optimizer walks this list in
    /// lockstep with [`ModelGrads::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.push(self.embed.geo.w.as_slice_mut().unwrap());
        v.push(self.embed.geo.b.as_slice_mut().unwrap());
        v.push(self.embed.color.w.as_slice_mut().unwrap());
        v.push(self.embed.color.b.as_slice_mut().unwrap());
        v.push(self.embed.pos.w.as_slice_mut().unwrap());
        v.push(self.embed.pos.b.as_slice_mut().unwrap());
        for layer in &mut self.encoder.layers {
            v.push(layer.affine.w.as_slice_mut().unwrap());
            v.push(layer.affine.b.as_slice_mut().unwrap());
        }
        v.push(self.proj.affine.w.as_slice_mut().unwrap());
        v.push(self.proj.affine.b.as_slice_mut().unwrap());
        v.push(self.decoders.geo.w.as_slice_mut().unwrap());
        v.push(self.decoders.geo.b.as_slice_mut().unwrap());
        v.push(self.decoders.color.w.as_slice_mut().unwrap());
        v.push(self.decoders.color.b.as_slice_mut().unwrap());
        v.push(self.prototypes.c.as_slice_mut().unwrap());
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.tensor_entries().iter().map(|(_, _, d)| d.len()).sum()
    }
}

/// Gradient accumulators for every tensor in [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub embed: EmbeddingGrads,
    pub encoder: Vec<AffineGrads>,
    pub proj: AffineGrads,
    pub dec_geo: AffineGrads,
    pub dec_color: AffineGrads,
    pub prototypes: Array2<f64>,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            embed: EmbeddingGrads::zeros_like(&params.embed),
            encoder: params
                .encoder
                .layers
                .iter()
                .map(|l| AffineGrads::zeros_like(&l.affine))
                .collect(),
            proj: AffineGrads::zeros_like(&params.proj.affine),
            dec_geo: AffineGrads::zeros_like(&params.decoders.geo),
            dec_color: AffineGrads::zeros_like(&params.decoders.color),
            prototypes: Array2::zeros(params.prototypes.c.raw_dim()),
        }
    }

    /// Flat views in the order of [`ModelParams::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        v.push(self.embed.geo.w.as_slice().unwrap());
        v.push(self.embed.geo.b.as_slice().unwrap());
        v.push(self.embed.color.w.as_slice().unwrap());
        v.push(self.embed.color.b.as_slice().unwrap());
        v.push(self.embed.pos.w.as_slice().unwrap());
        v.push(self.embed.pos.b.as_slice().unwrap());
        for g in &self.encoder {
            v.push(g.w.as_slice().unwrap());
            v.push(g.b.as_slice().unwrap());
        }
        v.push(self.proj.w.as_slice().unwrap());
        v.push(self.proj.b.as_slice().unwrap());
        v.push(self.dec_geo.w.as_slice().unwrap());
        v.push(self.dec_geo.b.as_slice().unwrap());
        v.push(self.dec_color.w.as_slice().unwrap());
        v.push(self.dec_color.b.as_slice().unwrap());
        v.push(self.prototypes.as_slice().unwrap());
        v
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Activations retained by [`forward_pair`] for [`backward_pair`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub geo01: Array2<f64>,
    pub color01: Array2<f64>,
    norms: Array2<f64>,
    enc_geo: EncoderCache,
    enc_color: EncoderCache,
    u_geo: Array2<f64>,
    u_color: Array2<f64>,
}

impl ForwardCache {
    /// Smallest |pre-activation| seen by any rectifier in either branch.
    pub fn min_abs_rectifier_input(&self, params: &ModelParams) -> f64 {
        self.enc_geo
            .min_abs_rectifier_input(&params.encoder)
            .min(self.enc_color.min_abs_rectifier_input(&params.encoder))
    }

    /// Smallest pre-normalization projection row norm in either branch.
    pub fn min_projection_norm(&self) -> f64 {
        let mut min = f64::INFINITY;
        for row in self.u_geo.rows().into_iter().chain(self.u_color.rows()) {
            min = min.min(row.dot(&row).sqrt());
        }
        min
    }
}

/// Runs both branches through the shared encoder and projection head.
///
/// f_geo = F(E_geo(geo)), f_color = F(E_color(color) + E_pos(‖geo‖²));
/// z_* are the ℓ2-normalized projections.
pub fn forward_pair(
    geo01: &Array2<f64>,
    color01: &Array2<f64>,
    params: &ModelParams,
) -> Result<(FeaturePair, ForwardCache)> {
    if geo01.dim() != color01.dim() || geo01.ncols() != 3 {
        return Err(Error::shape(
            "forward_pair",
            "matching N×3 inputs",
            format!("{:?}/{:?}", geo01.dim(), color01.dim()),
        ));
    }
    let e_geo = embed_geometry(geo01, &params.embed)?;
    let norms = squared_norms(geo01);
    let e_pos = params.embed.pos.forward(&norms);
    let e_color = embed_color(color01, &params.embed)? + &e_pos;

    let (f_geo, enc_geo) = encode_with_cache(&e_geo, &params.encoder)?;
    let (f_color, enc_color) = encode_with_cache(&e_color, &params.encoder)?;
    let (z_geo, u_geo) = params.proj.forward(&f_geo);
    let (z_color, u_color) = params.proj.forward(&f_color);

    Ok((
        FeaturePair {
            f_geo,
            f_color,
            z_geo,
            z_color,
        },
        ForwardCache {
            geo01: geo01.clone(),
            color01: color01.clone(),
            norms,
            enc_geo,
            enc_color,
            u_geo,
            u_color,
        },
    ))
}

/// The swapped decode of a feature pair: (p̂_geo, p̂_color).
pub fn decode_pair(pair: &FeaturePair, params: &ModelParams) -> Result<(Array2<f64>, Array2<f64>)> {
    decode(&pair.f_geo, &pair.f_color, &params.decoders)
}

/// Accumulates parameter gradients for upstream gradients w.r.t. both
/// normalized projections and both reconstructions.
pub fn backward_pair(
    params: &ModelParams,
    cache: &ForwardCache,
    pair: &FeaturePair,
    dz_geo: &Array2<f64>,
    dz_color: &Array2<f64>,
    dp_hat_geo: &Array2<f64>,
    dp_hat_color: &Array2<f64>,
    grads: &mut ModelGrads,
) {
    // Decoders: p̂_geo came from f_color, p̂_color from f_geo.
    let df_color_dec = params
        .decoders
        .geo
        .backward(&pair.f_color, dp_hat_geo, &mut grads.dec_geo);
    let df_geo_dec = params
        .decoders
        .color
        .backward(&pair.f_geo, dp_hat_color, &mut grads.dec_color);

    // Shared projection head, both branches accumulate into the same grads.
    let df_geo_proj = params
        .proj
        .backward(&pair.f_geo, &cache.u_geo, dz_geo, &mut grads.proj);
    let df_color_proj = params
        .proj
        .backward(&pair.f_color, &cache.u_color, dz_color, &mut grads.proj);

    let df_geo = df_geo_dec + df_geo_proj;
    let df_color = df_color_dec + df_color_proj;

    // Shared encoder likewise.
    let de_geo = encode_backward(&params.encoder, &cache.enc_geo, &df_geo, &mut grads.encoder);
    let de_color = encode_backward(
        &params.encoder,
        &cache.enc_color,
        &df_color,
        &mut grads.encoder,
    );

    params
        .embed
        .geo
        .backward(&cache.geo01, &de_geo, &mut grads.embed.geo);
    // The color branch input is E_color(color) + E_pos(‖geo‖²); the sum
    // routes the same upstream gradient into both embedding layers.
    params
        .embed
        .color
        .backward(&cache.color01, &de_color, &mut grads.embed.color);
    params
        .embed
        .pos
        .backward(&cache.norms, &de_color, &mut grads.embed.pos);
}
