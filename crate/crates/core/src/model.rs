//! End-to-end toy detector: conv backbone, transformer encoder, and a stack
//! of decoder layers with plain, aligned, or Gaussian-weighted cross-attention.
//!
//! A model is a parameter store plus a config; every pass builds a fresh
//! graph, so training and evaluation share one code path.

use alloc::format;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::aligner::{aligner_forward, AlignerConfig, AlignerParams, RegionFeatures, SalientPoints};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::graph::{Graph, Var};
use crate::matching::{detection_loss, match_queries, LossWeights, Matching};
use crate::nn::{
    embed_points, linear, multi_head_attention, sinusoidal_embed_2d, xavier_conv, xavier_uniform,
    ParamId, ParamStore,
};
use crate::tensor::Tensor;

/// Decoder wiring under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Plain cross-attention over learned queries: the control arm.
    Baseline,
    /// Semantics-aligned queries resampled from reference-box regions.
    Sam,
    /// Aligned queries plus a Gaussian attention bias around salient points.
    SamSmca,
}

/// Architecture knobs. `d` is the model width and `m` the head count, which
/// doubles as the salient-point count in aligned variants.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d: usize,
    pub m: usize,
    /// Object query count N.
    pub queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub classes: usize,
    pub image_side: usize,
    /// Backbone downsampling factor, a power of two; one stride-2 conv stage
    /// per factor of two.
    pub stride: usize,
    pub variant: Variant,
    pub aligner: AlignerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            m: 8,
            queries: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            classes: 3,
            image_side: 64,
            stride: 8,
            variant: Variant::Sam,
            aligner: AlignerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.d % self.m != 0 {
            return Err(Error::value(
                "model",
                format!("width {} must be a positive multiple of {} heads", self.d, self.m),
            ));
        }
        if (self.d / self.m) % 4 != 0 {
            return Err(Error::value(
                "model",
                format!(
                    "head width {} must be a multiple of 4 for position embeddings",
                    self.d / self.m
                ),
            ));
        }
        if self.decoder_layers == 0 {
            return Err(Error::value("model", "at least one decoder layer is required"));
        }
        if self.queries == 0 || self.classes == 0 {
            return Err(Error::value("model", "queries and classes must be positive"));
        }
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return Err(Error::value(
                "model",
                format!("stride {} must be a power of two, at least 2", self.stride),
            ));
        }
        if self.image_side == 0 || self.image_side % self.stride != 0 {
            return Err(Error::value(
                "model",
                format!(
                    "image side {} must be divisible by stride {}",
                    self.image_side, self.stride
                ),
            ));
        }
        if self.aligner.head_count != self.m {
            return Err(Error::value(
                "model",
                format!(
                    "aligner head count {} must equal m = {}",
                    self.aligner.head_count, self.m
                ),
            ));
        }
        Ok(())
    }

    /// Feature-map side after the backbone.
    pub fn feature_side(&self) -> usize {
        self.image_side / self.stride
    }
}

/// One attention block's projection weights.
#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub struct EncLayerIds {
    pub attn: AttnIds,
    pub ln1: LnIds,
    pub ffn: FfnIds,
    pub ln2: LnIds,
}

pub struct DecLayerIds {
    pub self_attn: AttnIds,
    pub ln1: LnIds,
    pub aligner: Option<AlignerParams>,
    /// Per-head Gaussian scale head `(w: d x m, b: m)`.
    pub smca: Option<(ParamId, ParamId)>,
    pub cross_attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
    pub ln3: LnIds,
}

/// Class head plus the three-layer box head.
#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub class_w: ParamId,
    pub class_b: ParamId,
    pub box_w1: ParamId,
    pub box_b1: ParamId,
    pub box_w2: ParamId,
    pub box_b2: ParamId,
    pub box_w3: ParamId,
    pub box_b3: ParamId,
}

pub struct ModelParams {
    /// `(weights, bias)` per stride-2 stage.
    pub backbone: Vec<(ParamId, ParamId)>,
    pub enc: Vec<EncLayerIds>,
    /// `N x 4` unconstrained reference-box parameters.
    pub box_logits: ParamId,
    pub dec: Vec<DecLayerIds>,
    /// Heads shared by every decoder layer but the last.
    pub aux_heads: Option<HeadIds>,
    /// The final layer's own heads.
    pub final_heads: HeadIds,
}

fn register_attn(store: &mut ParamStore, rng: &mut impl RngCore, d: usize, prefix: &str) -> AttnIds {
    AttnIds {
        wq: store.add(&format!("{prefix}.wq"), xavier_uniform(rng, d, d), 1.0),
        wk: store.add(&format!("{prefix}.wk"), xavier_uniform(rng, d, d), 1.0),
        wv: store.add(&format!("{prefix}.wv"), xavier_uniform(rng, d, d), 1.0),
        wo: store.add(&format!("{prefix}.wo"), xavier_uniform(rng, d, d), 1.0),
    }
}

fn register_ln(store: &mut ParamStore, d: usize, prefix: &str) -> LnIds {
    LnIds {
        gamma: store.add(&format!("{prefix}.g"), Tensor::full(&[d], 1.0).unwrap(), 1.0),
        beta: store.add(&format!("{prefix}.b"), Tensor::zeros(&[d]).unwrap(), 1.0),
    }
}

fn register_ffn(store: &mut ParamStore, rng: &mut impl RngCore, d: usize, prefix: &str) -> FfnIds {
    let hidden = 2 * d;
    FfnIds {
        w1: store.add(&format!("{prefix}.w1"), xavier_uniform(rng, d, hidden), 1.0),
        b1: store.add(&format!("{prefix}.b1"), Tensor::zeros(&[hidden]).unwrap(), 1.0),
        w2: store.add(&format!("{prefix}.w2"), xavier_uniform(rng, hidden, d), 1.0),
        b2: store.add(&format!("{prefix}.b2"), Tensor::zeros(&[d]).unwrap(), 1.0),
    }
}

fn register_heads(
    store: &mut ParamStore,
    rng: &mut impl RngCore,
    d: usize,
    classes: usize,
    prefix: &str,
) -> HeadIds {
    // The class bias starts low so every query begins near "no object"; the
    // box head's last layer starts at zero so predictions begin exactly at
    // the reference boxes.
    HeadIds {
        class_w: store.add(&format!("{prefix}.class.w"), xavier_uniform(rng, d, classes), 1.0),
        class_b: store.add(&format!("{prefix}.class.b"), Tensor::full(&[classes], -2.0).unwrap(), 1.0),
        box_w1: store.add(&format!("{prefix}.box.w1"), xavier_uniform(rng, d, d), 1.0),
        box_b1: store.add(&format!("{prefix}.box.b1"), Tensor::zeros(&[d]).unwrap(), 1.0),
        box_w2: store.add(&format!("{prefix}.box.w2"), xavier_uniform(rng, d, d), 1.0),
        box_b2: store.add(&format!("{prefix}.box.b2"), Tensor::zeros(&[d]).unwrap(), 1.0),
        box_w3: store.add(&format!("{prefix}.box.w3"), Tensor::zeros(&[d, 4]).unwrap(), 1.0),
        box_b3: store.add(&format!("{prefix}.box.b3"), Tensor::zeros(&[4]).unwrap(), 1.0),
    }
}

/// Reference boxes start on a regular grid with 0.4-side extents, stored as
/// pre-sigmoid values.
fn grid_box_logits(n: usize) -> Tensor {
    let side = (n as f64).sqrt().ceil() as usize;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut data = Vec::with_capacity(n * 4);
    for i in 0..n {
        let (row, col) = (i / side, i % side);
        data.push(logit((col as f64 + 0.5) / side as f64));
        data.push(logit((row as f64 + 0.5) / side as f64));
        data.push(logit(0.4));
        data.push(logit(0.4));
    }
    Tensor::new(&[n, 4], data).unwrap()
}

impl ModelParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl RngCore,
        cfg: &ModelConfig,
    ) -> Result<ModelParams> {
        cfg.validate()?;
        let d = cfg.d;
        let stages = cfg.stride.trailing_zeros() as usize;
        let mut backbone = Vec::with_capacity(stages);
        let mut cin = 3;
        for i in 1..=stages {
            let w = store.add(&format!("backbone.conv{i}.w"), xavier_conv(rng, d, cin, 3), 1.0);
            let b = store.add(&format!("backbone.conv{i}.b"), Tensor::zeros(&[d]).unwrap(), 1.0);
            backbone.push((w, b));
            cin = d;
        }
        let enc = (1..=cfg.encoder_layers)
            .map(|i| EncLayerIds {
                attn: register_attn(store, rng, d, &format!("enc{i}.attn")),
                ln1: register_ln(store, d, &format!("enc{i}.ln1")),
                ffn: register_ffn(store, rng, d, &format!("enc{i}.ffn")),
                ln2: register_ln(store, d, &format!("enc{i}.ln2")),
            })
            .collect();
        let box_logits = store.add("query.box_logits", grid_box_logits(cfg.queries), 1.0);
        let mut dec = Vec::with_capacity(cfg.decoder_layers);
        for i in 1..=cfg.decoder_layers {
            let self_attn = register_attn(store, rng, d, &format!("dec{i}.self"));
            let ln1 = register_ln(store, d, &format!("dec{i}.ln1"));
            let aligner = match cfg.variant {
                Variant::Baseline => None,
                _ => Some(AlignerParams::register(
                    store,
                    rng,
                    d,
                    &cfg.aligner,
                    &format!("dec{i}.aligner"),
                )?),
            };
            let smca = match cfg.variant {
                Variant::SamSmca => Some((
                    store.add(&format!("dec{i}.smca.w"), xavier_uniform(rng, d, cfg.m), 1.0),
                    store.add(&format!("dec{i}.smca.b"), Tensor::zeros(&[cfg.m]).unwrap(), 1.0),
                )),
                _ => None,
            };
            dec.push(DecLayerIds {
                self_attn,
                ln1,
                aligner,
                smca,
                cross_attn: register_attn(store, rng, d, &format!("dec{i}.cross")),
                ln2: register_ln(store, d, &format!("dec{i}.ln2")),
                ffn: register_ffn(store, rng, d, &format!("dec{i}.ffn")),
                ln3: register_ln(store, d, &format!("dec{i}.ln3")),
            });
        }
        let aux_heads = (cfg.decoder_layers > 1)
            .then(|| register_heads(store, rng, d, cfg.classes, "heads.aux"));
        let final_heads = register_heads(store, rng, d, cfg.classes, "heads.final");
        Ok(ModelParams { backbone, enc, box_logits, dec, aux_heads, final_heads })
    }

    /// Prediction heads for a layer: shared until the final layer, which owns
    /// its own set.
    pub fn heads_for_layer(&self, layer: usize) -> &HeadIds {
        if layer + 1 == self.dec.len() {
            &self.final_heads
        } else {
            self.aux_heads.as_ref().expect("aux heads exist whenever earlier layers do")
        }
    }
}

/// Backbone and encoder output: the encoded map and its fixed position grid.
pub struct EncodedFeatures {
    /// `H x W x d`.
    pub f: Var,
    /// `H x W x d` sinusoidal embeddings of cell centers.
    pub pos: Var,
    pub h: usize,
    pub w: usize,
}

/// Runs the conv backbone and transformer encoder over one `3 x S x S` image.
pub fn encode(
    g: &mut Graph,
    image: &Tensor,
    vars: &[Var],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<EncodedFeatures> {
    let s = cfg.image_side;
    if image.shape() != [3, s, s] {
        return Err(Error::shape(
            "model",
            format!("image must be 3 x {s} x {s}, got {}", crate::error::shape_str(image.shape())),
        ));
    }
    let mut x = g.constant(image.clone());
    for &(w, b) in &params.backbone {
        x = g.conv2d(x, vars[w.0], Some(vars[b.0]), 2, 1)?;
        x = g.relu(x);
    }
    let side = cfg.feature_side();
    let fmap = g.permute(x, &[1, 2, 0])?;
    let mut flat = g.reshape(fmap, &[side * side, cfg.d])?;
    let coords: Vec<[f64; 2]> = (0..side * side)
        .map(|i| [((i % side) as f64 + 0.5) / side as f64, ((i / side) as f64 + 0.5) / side as f64])
        .collect();
    let pos_flat = g.constant(sinusoidal_embed_2d(&coords, cfg.d)?);
    for layer in &params.enc {
        let sa = multi_head_attention(
            g,
            cfg.m,
            flat,
            Some(pos_flat),
            flat,
            Some(pos_flat),
            flat,
            vars[layer.attn.wq.0],
            vars[layer.attn.wk.0],
            vars[layer.attn.wv.0],
            vars[layer.attn.wo.0],
            None,
        )?;
        let r1 = g.add(flat, sa.out)?;
        let x1 = g.layer_norm(r1, vars[layer.ln1.gamma.0], vars[layer.ln1.beta.0])?;
        let h1 = linear(g, x1, vars[layer.ffn.w1.0], Some(vars[layer.ffn.b1.0]))?;
        let h1 = g.relu(h1);
        let h2 = linear(g, h1, vars[layer.ffn.w2.0], Some(vars[layer.ffn.b2.0]))?;
        let r2 = g.add(x1, h2)?;
        flat = g.layer_norm(r2, vars[layer.ln2.gamma.0], vars[layer.ln2.beta.0])?;
    }
    let f = g.reshape(flat, &[side, side, cfg.d])?;
    let pos = g.reshape(pos_flat, &[side, side, cfg.d])?;
    Ok(EncodedFeatures { f, pos, h: side, w: side })
}

/// Decoder input bundle: content, position embedding, and reference boxes.
pub struct QuerySet {
    /// `N x d` content embeddings, zeros before the first layer.
    pub q: Var,
    /// `N x d` embeddings of the reference-box centers.
    pub q_pos: Var,
    /// `N x 4` pre-sigmoid box parameters.
    pub box_logits: Var,
    /// Detached sigmoid of `box_logits`: the sampling regions.
    pub ref_boxes: Vec<BBox>,
}

/// Builds the layer-one query set from the current reference-box parameters.
pub fn init_queries(
    g: &mut Graph,
    vars: &[Var],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<QuerySet> {
    let box_logits = vars[params.box_logits.0];
    let sig = g.sigmoid(box_logits);
    let ref_boxes = boxes_from_rows(g.value(sig))?;
    let centers = g.slice(sig, 1, 0, 2)?;
    let q_pos = embed_points(g, centers, cfg.d)?;
    let q = g.constant(Tensor::zeros(&[cfg.queries, cfg.d])?);
    Ok(QuerySet { q, q_pos, box_logits, ref_boxes })
}

/// Reads `N x 4` center-size rows into boxes.
pub fn boxes_from_rows(t: &Tensor) -> Result<Vec<BBox>> {
    let s = t.shape();
    if s.len() != 2 || s[1] != 4 {
        return Err(Error::shape(
            "model",
            format!("boxes must be N x 4, got {}", crate::error::shape_str(s)),
        ));
    }
    Ok(t.data().chunks_exact(4).map(|r| BBox::new(r[0], r[1], r[2], r[3])).collect())
}

/// Class logits and boxes for one layer's queries. Boxes come from the
/// reference parameters plus predicted deltas under one shared sigmoid, so
/// zero deltas reproduce the reference boxes bit for bit.
pub fn predict_heads(
    g: &mut Graph,
    q: Var,
    box_logits: Var,
    vars: &[Var],
    heads: &HeadIds,
) -> Result<(Var, Var)> {
    let logits = linear(g, q, vars[heads.class_w.0], Some(vars[heads.class_b.0]))?;
    let h1 = linear(g, q, vars[heads.box_w1.0], Some(vars[heads.box_b1.0]))?;
    let h1 = g.relu(h1);
    let h2 = linear(g, h1, vars[heads.box_w2.0], Some(vars[heads.box_b2.0]))?;
    let h2 = g.relu(h2);
    let delta = linear(g, h2, vars[heads.box_w3.0], Some(vars[heads.box_b3.0]))?;
    let adjusted = g.add(box_logits, delta)?;
    Ok((logits, g.sigmoid(adjusted)))
}

/// Gaussian attention bias, `M x N x (H*W)`: per head and query, minus the
/// squared distance from each key-cell center to that head's salient point
/// over `2 s^2`, with per-query-per-head scales `s` predicted from pooled
/// region features. Each row is shifted so its best key sits exactly at zero.
pub fn smca_bias(
    g: &mut Graph,
    points: &SalientPoints,
    region: &RegionFeatures,
    w: Var,
    b: Var,
    h: usize,
    wid: usize,
) -> Result<Var> {
    let (n, m) = (points.n, points.m);
    let shape = g.shape(region.raw).to_vec();
    let (grid, d) = (shape[1], shape[3]);
    let flat = g.reshape(region.raw, &[n, grid * grid, d])?;
    let pooled = g.reduce_mean(flat, 1)?;
    let lin = linear(g, pooled, w, Some(b))?;
    let scales = g.softplus(lin);

    let keys = h * wid;
    let kx: Vec<f64> = (0..keys).map(|i| ((i % wid) as f64 + 0.5) / wid as f64).collect();
    let ky: Vec<f64> = (0..keys).map(|i| ((i / wid) as f64 + 0.5) / h as f64).collect();
    let kxv = g.constant(Tensor::new(&[1, keys], kx)?);
    let kyv = g.constant(Tensor::new(&[1, keys], ky)?);
    let ones_rows = g.constant(Tensor::full(&[n * m, 1], 1.0)?);
    let ones_keys = g.constant(Tensor::full(&[1, keys], 1.0)?);

    let px = g.slice(points.abs, 2, 0, 1)?;
    let px = g.reshape(px, &[n * m, 1])?;
    let py = g.slice(points.abs, 2, 1, 1)?;
    let py = g.reshape(py, &[n * m, 1])?;
    let kx_b = g.matmul(ones_rows, kxv)?;
    let ky_b = g.matmul(ones_rows, kyv)?;
    let cx_b = g.matmul(px, ones_keys)?;
    let cy_b = g.matmul(py, ones_keys)?;
    let dx = g.sub(kx_b, cx_b)?;
    let dy = g.sub(ky_b, cy_b)?;
    let dx2 = g.mul(dx, dx)?;
    let dy2 = g.mul(dy, dy)?;
    let dist = g.add(dx2, dy2)?;

    let srow = g.reshape(scales, &[n * m, 1])?;
    let s2 = g.mul(srow, srow)?;
    let denom = g.scale(s2, 2.0);
    let denom_b = g.matmul(denom, ones_keys)?;
    let ratio = g.div(dist, denom_b)?;
    let raw = g.neg(ratio);
    let rowmax = g.reduce_max(raw, 1)?;
    let rowmax = g.reshape(rowmax, &[n * m, 1])?;
    let rowmax_b = g.matmul(rowmax, ones_keys)?;
    let bias = g.sub(raw, rowmax_b)?;
    let bias = g.reshape(bias, &[n, m, keys])?;
    g.permute(bias, &[1, 0, 2])
}

/// One decoder layer's predictions and retained diagnostics.
pub struct LayerOutput {
    /// `N x C` class logits.
    pub logits: Var,
    /// `N x 4` center-size boxes in `(0,1)`.
    pub boxes: Var,
    /// `M x N x (H*W)` cross-attention weights.
    pub cross_weights: Var,
    /// `N x M x 2` salient points in image coordinates, aligned variants only.
    pub points: Option<Var>,
}

/// Per-layer prediction sets, one per decoder layer.
pub struct DetectionOutput {
    pub layers: Vec<LayerOutput>,
}

impl DetectionOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// One decoder layer: query self-attention, optional alignment, optionally
/// biased cross-attention over the encoded map, and the feed-forward block,
/// with residual plus layer norm around each of the three standard blocks.
/// Returns the updated queries and the layer's predictions.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    g: &mut Graph,
    enc: &EncodedFeatures,
    queries: &QuerySet,
    q: Var,
    vars: &[Var],
    layer: &DecLayerIds,
    heads: &HeadIds,
    cfg: &ModelConfig,
) -> Result<(Var, LayerOutput)> {
    let sa = multi_head_attention(
        g,
        cfg.m,
        q,
        Some(queries.q_pos),
        q,
        Some(queries.q_pos),
        q,
        vars[layer.self_attn.wq.0],
        vars[layer.self_attn.wk.0],
        vars[layer.self_attn.wv.0],
        vars[layer.self_attn.wo.0],
        None,
    )?;
    let r1 = g.add(q, sa.out)?;
    let q1 = g.layer_norm(r1, vars[layer.ln1.gamma.0], vars[layer.ln1.beta.0])?;

    let keys = enc.h * enc.w;
    let f_flat = g.reshape(enc.f, &[keys, cfg.d])?;
    let pos_flat = g.reshape(enc.pos, &[keys, cfg.d])?;

    let (q_c, q_c_pos, points, bias) = if cfg.variant == Variant::Baseline {
        (q1, queries.q_pos, None, None)
    } else {
        let ap = layer
            .aligner
            .as_ref()
            .ok_or_else(|| Error::value("model", "aligned variant is missing aligner parameters"))?;
        let out = aligner_forward(g, enc.f, &queries.ref_boxes, q1, vars, ap, &cfg.aligner)?;
        let bias = if cfg.variant == Variant::SamSmca {
            let (w, b) = layer
                .smca
                .ok_or_else(|| Error::value("model", "SMCA variant is missing scale parameters"))?;
            Some(smca_bias(g, &out.points, &out.region, vars[w.0], vars[b.0], enc.h, enc.w)?)
        } else {
            None
        };
        (out.q_new, out.q_new_pos, Some(out.points.abs), bias)
    };

    let ca = multi_head_attention(
        g,
        cfg.m,
        q_c,
        Some(q_c_pos),
        f_flat,
        Some(pos_flat),
        f_flat,
        vars[layer.cross_attn.wq.0],
        vars[layer.cross_attn.wk.0],
        vars[layer.cross_attn.wv.0],
        vars[layer.cross_attn.wo.0],
        bias,
    )?;
    let r2 = g.add(q_c, ca.out)?;
    let q2 = g.layer_norm(r2, vars[layer.ln2.gamma.0], vars[layer.ln2.beta.0])?;

    let h1 = linear(g, q2, vars[layer.ffn.w1.0], Some(vars[layer.ffn.b1.0]))?;
    let h1 = g.relu(h1);
    let h2 = linear(g, h1, vars[layer.ffn.w2.0], Some(vars[layer.ffn.b2.0]))?;
    let r3 = g.add(q2, h2)?;
    let q3 = g.layer_norm(r3, vars[layer.ln3.gamma.0], vars[layer.ln3.beta.0])?;

    let (logits, boxes) = predict_heads(g, q3, queries.box_logits, vars, heads)?;
    Ok((q3, LayerOutput { logits, boxes, cross_weights: ca.weights, points }))
}

/// Full pass: encode the image, run every decoder layer, and collect the
/// per-layer prediction sets.
pub fn forward(
    g: &mut Graph,
    image: &Tensor,
    vars: &[Var],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<DetectionOutput> {
    let enc = encode(g, image, vars, params, cfg)?;
    let queries = init_queries(g, vars, params, cfg)?;
    let mut q = queries.q;
    let mut layers = Vec::with_capacity(params.dec.len());
    for (i, layer) in params.dec.iter().enumerate() {
        let heads = params.heads_for_layer(i);
        let (q_next, out) = decoder_layer(g, &enc, &queries, q, vars, layer, heads, cfg)?;
        q = q_next;
        layers.push(out);
    }
    Ok(DetectionOutput { layers })
}

/// Matches and scores every decoder layer independently and sums the losses.
/// Matching runs on detached values, so it stays fixed under differentiation.
pub fn total_detection_loss(
    g: &mut Graph,
    out: &DetectionOutput,
    gts: &[(usize, BBox)],
    weights: &LossWeights,
) -> Result<(Var, Vec<Matching>)> {
    let mut total: Option<Var> = None;
    let mut matchings = Vec::with_capacity(out.layers.len());
    for layer in &out.layers {
        let probs = detached_probs(g.value(layer.logits));
        let boxes = boxes_from_rows(g.value(layer.boxes))?;
        let matching = match_queries(&probs, &boxes, gts)?;
        let loss = detection_loss(g, layer.logits, layer.boxes, gts, &matching, weights)?;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
        matchings.push(matching);
    }
    Ok((total.expect("at least one decoder layer"), matchings))
}

/// Numerically stable sigmoid over raw logits, outside any graph.
pub fn detached_probs(logits: &Tensor) -> Tensor {
    let data = logits
        .data()
        .iter()
        .map(|&x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    Tensor::new(logits.shape(), data).unwrap()
}
