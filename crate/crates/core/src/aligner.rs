//! Semantics aligner: reference-box region resampling, salient-point search,
//! point-anchored position embeddings, and reweighting by previous queries.
//!
//! The aligner replaces an opaque learned query with features read directly
//! off the encoded map inside the query's reference box, so query and key
//! live in the same embedding space. No learned projection touches the
//! resampled path; with reweighting disabled every output channel is a convex
//! combination of encoded-feature values.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::geometry::{roi_align, BBox};
use crate::graph::{Graph, SampleMode, Var};
use crate::nn::{embed_points, linear, xavier_conv, xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Region grid side: features are resampled on a `7 x 7` lattice per box.
pub const ROI_GRID: usize = 7;

/// Query resampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Mean over the region grid, full channel width.
    Avg,
    /// Per-channel max over the region grid, full channel width.
    Max,
    /// One salient point, replicated across all head slices.
    Sp1,
    /// One salient point per head, concatenated in head order.
    Spm,
}

/// Where salient-point coordinates live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchRange {
    /// Sigmoid outputs are box-relative; points cannot leave the box.
    WithinBox,
    /// Sigmoid outputs are absolute image coordinates; sampling is redirected
    /// to the full feature map and points may leave their box.
    WithinImage,
}

#[derive(Debug, Clone, Copy)]
pub struct AlignerConfig {
    pub strategy: Strategy,
    /// Number of salient points / head slices, M.
    pub head_count: usize,
    pub reweight: bool,
    pub search_range: SearchRange,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            strategy: Strategy::Spm,
            head_count: 8,
            reweight: true,
            search_range: SearchRange::WithinBox,
        }
    }
}

/// Parameter handles for one aligner instance.
pub struct AlignerParams {
    pub d: usize,
    pub m: usize,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
    pub mlp1_w: ParamId,
    pub mlp1_b: ParamId,
    pub mlp2_w: ParamId,
    pub mlp2_b: ParamId,
    pub rw1: ParamId,
    pub rw2: ParamId,
}

impl AlignerParams {
    /// Registers all aligner parameters under `prefix`. The point head's
    /// final layer starts at zero so initial points sit at box centers.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl RngCore,
        d: usize,
        config: &AlignerConfig,
        prefix: &str,
    ) -> Result<Self> {
        let m = config.head_count;
        if m == 0 || d % m != 0 {
            return Err(Error::value(
                "aligner",
                format!("width {d} is not divisible into {m} head slices"),
            ));
        }
        let dm = d / m;
        if dm % 4 != 0 {
            return Err(Error::value(
                "aligner",
                format!("per-point width {dm} must be a multiple of 4 for the embeddings"),
            ));
        }
        let name = |s: &str| -> String { format!("{prefix}.{s}") };
        let zeros1 = |n: usize| Tensor::zeros(&[n]).expect("bias shape");
        let flat = ROI_GRID * ROI_GRID * dm;
        Ok(AlignerParams {
            d,
            m,
            conv1_w: store.add(&name("conv1.w"), xavier_conv(rng, d, d, 3), 1.0),
            conv1_b: store.add(&name("conv1.b"), zeros1(d), 1.0),
            conv2_w: store.add(&name("conv2.w"), xavier_conv(rng, d, d, 3), 1.0),
            conv2_b: store.add(&name("conv2.b"), zeros1(d), 1.0),
            reduce_w: store.add(&name("reduce.w"), xavier_conv(rng, dm, d, 1), 1.0),
            reduce_b: store.add(&name("reduce.b"), zeros1(dm), 1.0),
            mlp1_w: store.add(&name("points.fc1.w"), xavier_uniform(rng, flat, d), 1.0),
            mlp1_b: store.add(&name("points.fc1.b"), zeros1(d), 1.0),
            mlp2_w: store.add(&name("points.fc2.w"), Tensor::zeros(&[d, 2 * m])?, 1.0),
            mlp2_b: store.add(&name("points.fc2.b"), zeros1(2 * m), 1.0),
            rw1: store.add(&name("reweight.w1"), xavier_uniform(rng, d, d), 1.0),
            rw2: store.add(&name("reweight.w2"), xavier_uniform(rng, d, d), 1.0),
        })
    }
}

/// Features sampled inside the reference boxes.
pub struct RegionFeatures {
    /// `N x 7 x 7 x d`: raw RoI grid off the encoded map.
    pub raw: Var,
    /// `N x 7 x 7 x d/M`: conv-refined, channel-reduced grid; both the point
    /// head's input and the sampling target for point strategies.
    pub reduced: Var,
    /// `H x W x d/M`: the same conv net over the full map, present only in
    /// within-image mode where sampling may leave the box.
    pub full_reduced: Option<Var>,
    /// Clipped reference boxes the grids were sampled from.
    pub boxes: Vec<BBox>,
}

/// Salient points of every query: box-relative and absolute coordinates,
/// both differentiable.
pub struct SalientPoints {
    /// `N x M x 2`, box-relative; in `(0,1)` for within-box search.
    pub rel: Var,
    /// `N x M x 2`, normalized image coordinates.
    pub abs: Var,
    pub n: usize,
    pub m: usize,
}

pub struct AlignerOutput {
    /// `N x d` resampled query embeddings.
    pub q_new: Var,
    /// `N x d` point-anchored position embeddings.
    pub q_new_pos: Var,
    pub points: SalientPoints,
    pub region: RegionFeatures,
}

/// Applies the region conv net (3x3 relu, 3x3 relu, 1x1 reduce) to a
/// channels-last input, rank 3 `H x W x d` or rank 4 `N x G x G x d`.
fn conv_net(
    g: &mut Graph,
    input: Var,
    vars: &[Var],
    p: &AlignerParams,
) -> Result<Var> {
    let s = g.shape(input).to_vec();
    let (to_first, to_last): (Vec<usize>, Vec<usize>) = match s.len() {
        3 => (alloc::vec![2, 0, 1], alloc::vec![1, 2, 0]),
        4 => (alloc::vec![0, 3, 1, 2], alloc::vec![0, 2, 3, 1]),
        _ => {
            return Err(Error::shape(
                "aligner",
                format!("conv input must be rank 3 or 4, got {}", crate::error::shape_str(&s)),
            ))
        }
    };
    let x = g.permute(input, &to_first)?;
    let x = g.conv2d(x, vars[p.conv1_w.0], Some(vars[p.conv1_b.0]), 1, 1)?;
    let x = g.relu(x);
    let x = g.conv2d(x, vars[p.conv2_w.0], Some(vars[p.conv2_b.0]), 1, 1)?;
    let x = g.relu(x);
    let x = g.conv2d(x, vars[p.reduce_w.0], Some(vars[p.reduce_b.0]), 1, 0)?;
    g.permute(x, &to_last)
}

/// Resamples the encoded map inside each box and refines it: the raw grid,
/// its reduced form, and (within-image mode) the reduced full map.
pub fn region_features(
    g: &mut Graph,
    fmap: Var,
    boxes: &[BBox],
    vars: &[Var],
    params: &AlignerParams,
    config: &AlignerConfig,
) -> Result<RegionFeatures> {
    let raw = roi_align(g, fmap, boxes, ROI_GRID)?;
    let reduced = conv_net(g, raw, vars, params)?;
    let full_reduced = match config.search_range {
        SearchRange::WithinImage => Some(conv_net(g, fmap, vars, params)?),
        SearchRange::WithinBox => None,
    };
    let clipped: Result<Vec<BBox>> =
        boxes.iter().map(|b| b.clipped_xyxy().map(BBox::from_xyxy)).collect();
    Ok(RegionFeatures { raw, reduced, full_reduced, boxes: clipped? })
}

/// Per-query `(x1, y1)` and `(w, h)` of the clipped boxes, tiled to
/// `N x M x 2` constants for coordinate transforms.
fn box_transform_consts(g: &mut Graph, boxes: &[BBox], m: usize) -> Result<(Var, Var)> {
    let n = boxes.len();
    let mut origin = Vec::with_capacity(n * m * 2);
    let mut size = Vec::with_capacity(n * m * 2);
    for b in boxes {
        let [x1, y1, x2, y2] = b.clipped_xyxy()?;
        for _ in 0..m {
            origin.extend_from_slice(&[x1, y1]);
            size.extend_from_slice(&[x2 - x1, y2 - y1]);
        }
    }
    let o = g.constant(Tensor::new(&[n, m, 2], origin)?);
    let s = g.constant(Tensor::new(&[n, m, 2], size)?);
    Ok((o, s))
}

/// Predicts salient points from the reduced region grid: flatten, two-layer
/// MLP, sigmoid. Within-box search reads the sigmoid as box-relative
/// coordinates; within-image search reads it as absolute ones. The single
/// point of the SP1 strategy is replicated across all M slots.
pub fn predict_salient_points(
    g: &mut Graph,
    region: &RegionFeatures,
    vars: &[Var],
    params: &AlignerParams,
    config: &AlignerConfig,
) -> Result<SalientPoints> {
    let s = g.shape(region.reduced).to_vec();
    let (n, m, dm) = (s[0], params.m, params.d / params.m);
    if s.len() != 4 || s[1] != ROI_GRID || s[2] != ROI_GRID || s[3] != dm {
        return Err(Error::shape(
            "aligner",
            format!(
                "reduced grid must be N x {ROI_GRID} x {ROI_GRID} x {dm}, got {}",
                crate::error::shape_str(&s)
            ),
        ));
    }
    let flat = g.reshape(region.reduced, &[n, ROI_GRID * ROI_GRID * dm])?;
    let h = linear(g, flat, vars[params.mlp1_w.0], Some(vars[params.mlp1_b.0]))?;
    let h = g.relu(h);
    let logits = linear(g, h, vars[params.mlp2_w.0], Some(vars[params.mlp2_b.0]))?;
    let logits = g.reshape(logits, &[n, m, 2])?;
    let mut sig = g.sigmoid(logits);
    if config.strategy == Strategy::Sp1 {
        let first = g.slice(sig, 1, 0, 1)?;
        let copies = alloc::vec![first; m];
        sig = g.concat(1, &copies)?;
    }
    let (origin, size) = box_transform_consts(g, &region.boxes, m)?;
    let (rel, abs) = match config.search_range {
        SearchRange::WithinBox => {
            let scaled = g.mul(sig, size)?;
            let abs = g.add(scaled, origin)?;
            (sig, abs)
        }
        SearchRange::WithinImage => {
            let off = g.sub(sig, origin)?;
            let rel = g.div(off, size)?;
            (rel, sig)
        }
    };
    Ok(SalientPoints { rel, abs, n, m })
}

/// Builds the new query embeddings according to the strategy. Pooling
/// strategies aggregate the raw grid at full width; point strategies
/// bilinearly sample the reduced grid (or the reduced full map when points
/// may leave the box) and concatenate per-point slices in head order.
pub fn resample_queries(
    g: &mut Graph,
    region: &RegionFeatures,
    pts: &SalientPoints,
    config: &AlignerConfig,
) -> Result<Var> {
    let sr = g.shape(region.raw).to_vec();
    let (n, d) = (sr[0], sr[3]);
    match config.strategy {
        Strategy::Avg => {
            let flat = g.reshape(region.raw, &[n, ROI_GRID * ROI_GRID, d])?;
            g.reduce_mean(flat, 1)
        }
        Strategy::Max => {
            let flat = g.reshape(region.raw, &[n, ROI_GRID * ROI_GRID, d])?;
            g.reduce_max(flat, 1)
        }
        Strategy::Sp1 | Strategy::Spm => {
            let dm = g.shape(region.reduced)[3];
            if pts.m * dm != d {
                return Err(Error::value(
                    "aligner",
                    format!("{} points of width {dm} cannot fill a {d}-wide query", pts.m),
                ));
            }
            let sampled = match config.search_range {
                SearchRange::WithinBox => {
                    g.point_sample(region.reduced, pts.rel, SampleMode::AlignCorners)?
                }
                SearchRange::WithinImage => {
                    let full = region.full_reduced.ok_or_else(|| {
                        Error::value(
                            "aligner",
                            "within-image search needs the reduced full map",
                        )
                    })?;
                    g.point_sample(full, pts.abs, SampleMode::PixelCenter)?
                }
            };
            g.reshape(sampled, &[n, d])
        }
    }
}

/// Sinusoidal embeddings of the points' absolute coordinates, one `d/M`
/// slice per point, concatenated in the same head order as the resampled
/// queries.
pub fn make_position_embeddings(
    g: &mut Graph,
    pts: &SalientPoints,
    d: usize,
) -> Result<Var> {
    if d % pts.m != 0 {
        return Err(Error::value(
            "aligner",
            format!("width {d} is not divisible into {} point slices", pts.m),
        ));
    }
    let flat = g.reshape(pts.abs, &[pts.n * pts.m, 2])?;
    let emb = embed_points(g, flat, d / pts.m)?;
    g.reshape(emb, &[pts.n, d])
}

/// Reweights queries and position embeddings by sigmoid-gated projections of
/// the previous queries; gradients flow into `q_prev`.
pub fn reweight(
    g: &mut Graph,
    q_new: Var,
    q_pos: Var,
    q_prev: Var,
    rw1: Var,
    rw2: Var,
) -> Result<(Var, Var)> {
    for (name, v) in [("q_new", q_new), ("q_pos", q_pos)] {
        if g.shape(v) != g.shape(q_prev) {
            return Err(Error::shape(
                "reweight",
                format!(
                    "{name} {} must match q_prev {}",
                    crate::error::shape_str(g.shape(v)),
                    crate::error::shape_str(g.shape(q_prev))
                ),
            ));
        }
    }
    let p1 = g.matmul(q_prev, rw1)?;
    let c1 = g.sigmoid(p1);
    let p2 = g.matmul(q_prev, rw2)?;
    let c2 = g.sigmoid(p2);
    Ok((g.mul(q_new, c1)?, g.mul(q_pos, c2)?))
}

/// Full aligner pass: region features, salient points, resampled queries,
/// position embeddings, and optional reweighting.
pub fn aligner_forward(
    g: &mut Graph,
    fmap: Var,
    boxes: &[BBox],
    q_prev: Var,
    vars: &[Var],
    params: &AlignerParams,
    config: &AlignerConfig,
) -> Result<AlignerOutput> {
    if config.head_count != params.m {
        return Err(Error::value(
            "aligner",
            format!(
                "config asks for {} heads but parameters were built for {}",
                config.head_count, params.m
            ),
        ));
    }
    let region = region_features(g, fmap, boxes, vars, params, config)?;
    let points = predict_salient_points(g, &region, vars, params, config)?;
    let q_new = resample_queries(g, &region, &points, config)?;
    let q_pos = make_position_embeddings(g, &points, params.d)?;
    let (q_new, q_pos) = if config.reweight {
        reweight(g, q_new, q_pos, q_prev, vars[params.rw1.0], vars[params.rw2.0])?
    } else {
        (q_new, q_pos)
    };
    Ok(AlignerOutput { q_new, q_new_pos: q_pos, points, region })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_max_rel, FD_TOL};
    use crate::nn::{sinusoidal_embed_2d, uniform};
    use rand_core::SeedableRng;

    type Rng = rand_chacha::ChaCha8Rng;

    const D: usize = 16;
    const M: usize = 4;
    const DM: usize = D / M;

    fn test_config(strategy: Strategy) -> AlignerConfig {
        AlignerConfig {
            strategy,
            head_count: M,
            reweight: false,
            search_range: SearchRange::WithinBox,
        }
    }

    fn setup(seed: u64, config: &AlignerConfig) -> (ParamStore, AlignerParams) {
        let rng = &mut Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = AlignerParams::register(&mut store, rng, D, config, "aligner").unwrap();
        (store, params)
    }

    fn randomize_point_head(store: &mut ParamStore, params: &AlignerParams, seed: u64) {
        let rng = &mut Rng::seed_from_u64(seed);
        for v in store.get_mut(params.mlp2_w).data_mut() {
            *v = uniform(rng, -0.8, 0.8);
        }
        for v in store.get_mut(params.mlp2_b).data_mut() {
            *v = uniform(rng, -0.4, 0.4);
        }
    }

    fn rand_map(rng: &mut Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[h, w, c], |_| uniform(rng, -1.0, 1.0)).unwrap()
    }

    fn test_boxes() -> Vec<BBox> {
        alloc::vec![BBox::new(0.4, 0.45, 0.5, 0.4), BBox::new(0.65, 0.6, 0.3, 0.5)]
    }

    fn forward(
        g: &mut Graph,
        fmap: &Tensor,
        store: &ParamStore,
        params: &AlignerParams,
        config: &AlignerConfig,
    ) -> AlignerOutput {
        let fv = g.constant(fmap.clone());
        let vars = store.bind(g, false);
        let n = test_boxes().len();
        let q_prev = g.constant(Tensor::full(&[n, D], 0.3).unwrap());
        aligner_forward(g, fv, &test_boxes(), q_prev, &vars, params, config).unwrap()
    }

    #[test]
    fn points_default_to_box_centers() {
        // The point head's last layer is zero-initialized, so sigmoid(0)
        // puts every point at the box center.
        let config = test_config(Strategy::Spm);
        let (store, params) = setup(80, &config);
        let rng = &mut Rng::seed_from_u64(81);
        let fmap = rand_map(rng, 6, 6, D);
        let mut g = Graph::new();
        let out = forward(&mut g, &fmap, &store, &params, &config);
        for &v in g.value(out.points.rel).data() {
            assert_eq!(v, 0.5, "untrained points must sit exactly at box centers");
        }
        let abs = g.value(out.points.abs);
        let boxes = test_boxes();
        for (q, b) in boxes.iter().enumerate() {
            for p in 0..M {
                let x = abs.data()[(q * M + p) * 2];
                let y = abs.data()[(q * M + p) * 2 + 1];
                assert!((x - b.cx).abs() < 1e-15 && (y - b.cy).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn points_stay_strictly_inside_boxes() {
        let config = test_config(Strategy::Spm);
        let (mut store, params) = setup(82, &config);
        randomize_point_head(&mut store, &params, 83);
        let rng = &mut Rng::seed_from_u64(84);
        let fmap = rand_map(rng, 6, 6, D);
        let mut g = Graph::new();
        let out = forward(&mut g, &fmap, &store, &params, &config);
        for &v in g.value(out.points.rel).data() {
            assert!(v > 0.0 && v < 1.0, "relative coordinate {v} escaped (0,1)");
        }
        let abs = g.value(out.points.abs).data().to_vec();
        for (q, b) in test_boxes().iter().enumerate() {
            for p in 0..M {
                let (x, y) = (abs[(q * M + p) * 2], abs[(q * M + p) * 2 + 1]);
                assert!(
                    b.contains(x, y, 1e-12),
                    "point ({x},{y}) left its box {b:?}"
                );
            }
        }
    }

    #[test]
    fn point_gradients_reach_conv_weights() {
        let config = test_config(Strategy::Spm);
        let (mut store, params) = setup(85, &config);
        randomize_point_head(&mut store, &params, 86);
        let rng = &mut Rng::seed_from_u64(87);
        let fmap = rand_map(rng, 6, 6, D);
        let conv1 = store.get(params.conv1_w).clone();
        let max = fd_max_rel(&[conv1], |g, v| {
            let fv = g.constant(fmap.clone());
            let mut vars = store.bind(g, false);
            vars[params.conv1_w.0] = v[0];
            let region = region_features(g, fv, &test_boxes(), &vars, &params, &config)?;
            let pts = predict_salient_points(g, &region, &vars, &params, &config)?;
            Ok(g.mean_all(pts.rel))
        })
        .unwrap();
        assert!(max < FD_TOL, "point-head FD mismatch: {max:.3e}");

        // And the gradient must be genuinely nonzero.
        let mut g = Graph::new();
        let fv = g.constant(fmap.clone());
        let mut vars = store.bind(&mut g, false);
        let leaf = g.leaf(store.get(params.conv1_w).clone(), true);
        vars[params.conv1_w.0] = leaf;
        let region = region_features(&mut g, fv, &test_boxes(), &vars, &params, &config).unwrap();
        let pts = predict_salient_points(&mut g, &region, &vars, &params, &config).unwrap();
        let loss = g.mean_all(pts.rel);
        g.backward(loss).unwrap();
        let grad = g.grad(leaf).unwrap();
        assert!(
            grad.iter().any(|&x| x.abs() > 1e-12),
            "point coordinates must depend on the conv weights"
        );
    }

    #[test]
    fn sp1_replicates_one_point_everywhere() {
        let config = test_config(Strategy::Sp1);
        let (mut store, params) = setup(88, &config);
        randomize_point_head(&mut store, &params, 89);
        let rng = &mut Rng::seed_from_u64(90);
        let fmap = rand_map(rng, 6, 6, D);
        let mut g = Graph::new();
        let out = forward(&mut g, &fmap, &store, &params, &config);
        let rel = g.value(out.points.rel);
        for q in 0..2 {
            let base = &rel.data()[q * M * 2..q * M * 2 + 2];
            for p in 1..M {
                let pt = &rel.data()[(q * M + p) * 2..(q * M + p) * 2 + 2];
                assert_eq!(pt, base, "SP1 must replicate the first point");
            }
        }
    }

    #[test]
    fn resampling_preserves_constant_grids_under_every_strategy() {
        // Feed hand-built constant region features straight to the
        // resampler: every strategy must return the constant.
        let c = 0.75;
        let (n, m) = (2, M);
        for strategy in [Strategy::Avg, Strategy::Max, Strategy::Sp1, Strategy::Spm] {
            let mut g = Graph::new();
            let raw = g.constant(Tensor::full(&[n, ROI_GRID, ROI_GRID, D], c).unwrap());
            let reduced = g.constant(Tensor::full(&[n, ROI_GRID, ROI_GRID, DM], c).unwrap());
            let region = RegionFeatures {
                raw,
                reduced,
                full_reduced: None,
                boxes: test_boxes(),
            };
            let rel = g.constant(
                Tensor::from_fn(&[n, m, 2], |i| 0.2 + 0.05 * (i % 7) as f64).unwrap(),
            );
            let pts = SalientPoints { rel, abs: rel, n, m };
            let config = test_config(strategy);
            let q = resample_queries(&mut g, &region, &pts, &config).unwrap();
            assert_eq!(g.shape(q), &[n, D]);
            for &v in g.value(q).data() {
                assert!(
                    (v - c).abs() < 1e-12,
                    "{strategy:?} broke constant preservation: {v}"
                );
            }
        }
    }

    #[test]
    fn spm_slices_equal_per_point_samples() {
        // Head alignment: slice h of the output is exactly the bilinear
        // sample of the reduced grid at point h.
        let rng = &mut Rng::seed_from_u64(91);
        let (n, m) = (2, M);
        let mut g = Graph::new();
        let reduced_t = Tensor::from_fn(&[n, ROI_GRID, ROI_GRID, DM], |_| uniform(rng, -1.0, 1.0))
            .unwrap();
        let raw = g.constant(Tensor::zeros(&[n, ROI_GRID, ROI_GRID, D]).unwrap());
        let reduced = g.constant(reduced_t);
        let region = RegionFeatures { raw, reduced, full_reduced: None, boxes: test_boxes() };
        let rel_t = Tensor::from_fn(&[n, m, 2], |_| uniform(rng, 0.05, 0.95)).unwrap();
        let rel = g.constant(rel_t.clone());
        let pts = SalientPoints { rel, abs: rel, n, m };
        let config = test_config(Strategy::Spm);
        let q = resample_queries(&mut g, &region, &pts, &config).unwrap();
        let qd = g.value(q).data().to_vec();

        let single = g
            .point_sample(reduced, rel, crate::graph::SampleMode::AlignCorners)
            .unwrap();
        let sd = g.value(single).data();
        assert_eq!(qd, sd, "concatenated slices must be the per-point samples, bitwise");
    }

    #[test]
    fn max_strategy_finds_spiked_cell() {
        // Per-channel max oracle over the grid cells.
        let rng = &mut Rng::seed_from_u64(92);
        let n = 2;
        let raw_t =
            Tensor::from_fn(&[n, ROI_GRID, ROI_GRID, D], |_| uniform(rng, -1.0, 1.0)).unwrap();
        let mut expect = alloc::vec![f64::NEG_INFINITY; n * D];
        for q in 0..n {
            for cell in 0..ROI_GRID * ROI_GRID {
                for c in 0..D {
                    let v = raw_t.data()[(q * ROI_GRID * ROI_GRID + cell) * D + c];
                    if v > expect[q * D + c] {
                        expect[q * D + c] = v;
                    }
                }
            }
        }
        let mut g = Graph::new();
        let raw = g.constant(raw_t);
        let reduced = g.constant(Tensor::zeros(&[n, ROI_GRID, ROI_GRID, DM]).unwrap());
        let region = RegionFeatures { raw, reduced, full_reduced: None, boxes: test_boxes() };
        let rel = g.constant(Tensor::full(&[n, M, 2], 0.5).unwrap());
        let pts = SalientPoints { rel, abs: rel, n, m: M };
        let config = test_config(Strategy::Max);
        let q = resample_queries(&mut g, &region, &pts, &config).unwrap();
        assert_eq!(g.value(q).data(), expect.as_slice());
    }

    #[test]
    fn position_embeddings_anchor_at_image_coordinates() {
        // Whole-image box: a point at its center embeds image coord (0.5, 0.5).
        let mut g = Graph::new();
        let rel = g.constant(Tensor::full(&[1, M, 2], 0.5).unwrap());
        let boxes = alloc::vec![BBox::new(0.5, 0.5, 1.0, 1.0)];
        let (origin, size) = box_transform_consts(&mut g, &boxes, M).unwrap();
        let scaled = g.mul(rel, size).unwrap();
        let abs = g.add(scaled, origin).unwrap();
        let pts = SalientPoints { rel, abs, n: 1, m: M };
        let emb = make_position_embeddings(&mut g, &pts, D).unwrap();
        let plain = sinusoidal_embed_2d(&[[0.5, 0.5]], DM).unwrap();
        for h in 0..M {
            let slice = &g.value(emb).data()[h * DM..(h + 1) * DM];
            assert_eq!(slice, plain.data(), "slice {h} must embed the image coordinate");
        }
    }

    #[test]
    fn position_embeddings_separate_distinct_points() {
        let mut g = Graph::new();
        let mut coords: Vec<f64> =
            (0..M).flat_map(|_| [0.3, 0.4]).collect();
        coords[0] = 0.7;
        coords[1] = 0.6;
        let rel = g.constant(Tensor::new(&[1, M, 2], coords).unwrap());
        let pts = SalientPoints { rel, abs: rel, n: 1, m: M };
        let emb = make_position_embeddings(&mut g, &pts, D).unwrap();
        let d0 = &g.value(emb).data()[0..DM];
        let d1 = &g.value(emb).data()[DM..2 * DM];
        let dist: f64 = d0.iter().zip(d1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        assert!(
            libm::sqrt(dist) > 1e-6,
            "distinct points must give distinct embedding slices"
        );
    }

    #[test]
    fn position_embeddings_at_origin_are_sin_zero_cos_one() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[1, M, 2]).unwrap());
        let pts = SalientPoints { rel: zero, abs: zero, n: 1, m: M };
        let emb = make_position_embeddings(&mut g, &pts, D).unwrap();
        for (i, &v) in g.value(emb).data().iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(v, 0.0, "sin slot {i} at the origin");
            } else {
                assert_eq!(v, 1.0, "cos slot {i} at the origin");
            }
        }
    }

    #[test]
    fn reweight_with_zero_weights_halves_inputs() {
        let rng = &mut Rng::seed_from_u64(93);
        let mut g = Graph::new();
        let qn = g.constant(Tensor::from_fn(&[3, D], |_| uniform(rng, -1.0, 1.0)).unwrap());
        let qp = g.constant(Tensor::from_fn(&[3, D], |_| uniform(rng, -1.0, 1.0)).unwrap());
        let prev = g.constant(Tensor::from_fn(&[3, D], |_| uniform(rng, -1.0, 1.0)).unwrap());
        let w0 = g.constant(Tensor::zeros(&[D, D]).unwrap());
        let (a, b) = reweight(&mut g, qn, qp, prev, w0, w0).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(qn).data()) {
            assert_eq!(*x, 0.5 * y, "zero projections must gate by exactly one half");
        }
        for (x, y) in g.value(b).data().iter().zip(g.value(qp).data()) {
            assert_eq!(*x, 0.5 * y);
        }
    }

    #[test]
    fn reweight_saturates_to_identity() {
        let mut g = Graph::new();
        let qn = g.constant(Tensor::from_fn(&[2, D], |i| 0.1 * i as f64 - 0.7).unwrap());
        let qp = g.constant(Tensor::from_fn(&[2, D], |i| 0.05 * i as f64).unwrap());
        let prev = g.constant(Tensor::full(&[2, D], 10.0).unwrap());
        let w = g.constant(Tensor::full(&[D, D], 0.5).unwrap());
        // Projections are 10 * 0.5 * D = 80 >= 40: the gate saturates.
        let (a, b) = reweight(&mut g, qn, qp, prev, w, w).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(qn).data()) {
            assert!((x - y).abs() < 1e-12, "saturated gate must pass {y}, got {x}");
        }
        for (x, y) in g.value(b).data().iter().zip(g.value(qp).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reweight_gradients_flow_to_previous_queries() {
        let rng = &mut Rng::seed_from_u64(94);
        let qn = Tensor::from_fn(&[2, 8], |_| uniform(rng, -1.0, 1.0)).unwrap();
        let qp = Tensor::from_fn(&[2, 8], |_| uniform(rng, -1.0, 1.0)).unwrap();
        let prev = Tensor::from_fn(&[2, 8], |_| uniform(rng, -1.0, 1.0)).unwrap();
        let w1 = Tensor::from_fn(&[8, 8], |_| uniform(rng, -0.5, 0.5)).unwrap();
        let w2 = Tensor::from_fn(&[8, 8], |_| uniform(rng, -0.5, 0.5)).unwrap();
        let max = fd_max_rel(&[prev], |g, v| {
            let qnv = g.constant(qn.clone());
            let qpv = g.constant(qp.clone());
            let w1v = g.constant(w1.clone());
            let w2v = g.constant(w2.clone());
            let (a, b) = reweight(g, qnv, qpv, v[0], w1v, w2v)?;
            let s = g.add(a, b)?;
            Ok(g.sum_all(s))
        })
        .unwrap();
        assert!(max < FD_TOL, "reweight FD mismatch: {max:.3e}");
    }

    #[test]
    fn constant_features_give_constant_queries() {
        let config = test_config(Strategy::Spm);
        let (store, params) = setup(95, &config);
        let fmap = Tensor::full(&[6, 6, D], 0.4).unwrap();
        let mut g = Graph::new();
        let out = forward(&mut g, &fmap, &store, &params, &config);
        let q = g.value(out.q_new);
        let first = &q.data()[0..D];
        for row in q.data().chunks_exact(D) {
            for (a, b) in row.iter().zip(first) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "constant map must give query-independent embeddings"
                );
            }
        }
    }

    #[test]
    fn queries_are_convex_combinations_of_region_features() {
        // The central structural property: with reweighting off, every
        // output channel sits inside the [min, max] of that channel over the
        // query's sampled grid.
        let config = test_config(Strategy::Spm);
        let (mut store, params) = setup(96, &config);
        randomize_point_head(&mut store, &params, 97);
        let rng = &mut Rng::seed_from_u64(98);
        let fmap = rand_map(rng, 6, 6, D);
        let mut g = Graph::new();
        let out = forward(&mut g, &fmap, &store, &params, &config);
        let q = g.value(out.q_new).data().to_vec();
        let grid = g.value(out.region.reduced).data().to_vec();
        let cells = ROI_GRID * ROI_GRID;
        for qi in 0..2 {
            for h in 0..M {
                for c in 0..DM {
                    let v = q[qi * D + h * DM + c];
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for cell in 0..cells {
                        let gv = grid[(qi * cells + cell) * DM + c];
                        lo = lo.min(gv);
                        hi = hi.max(gv);
                    }
                    assert!(
                        v >= lo - 1e-12 && v <= hi + 1e-12,
                        "query {qi} slice {h} channel {c}: {v} outside [{lo}, {hi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn aligner_gradients_match_finite_differences_end_to_end() {
        let config = test_config(Strategy::Spm);
        let (mut store, params) = setup(99, &config);
        randomize_point_head(&mut store, &params, 100);
        let rng = &mut Rng::seed_from_u64(101);
        let fmap = rand_map(rng, 5, 5, D);
        let w1 = Tensor::from_fn(&[2, D], |_| uniform(rng, -1.0, 1.0)).unwrap();
        let w2 = Tensor::from_fn(&[2, D], |_| uniform(rng, -1.0, 1.0)).unwrap();
        let max = fd_max_rel(&[fmap], |g, v| {
            let vars = store.bind(g, false);
            let q_prev = g.constant(Tensor::full(&[2, D], 0.3).unwrap());
            let out = aligner_forward(g, v[0], &test_boxes(), q_prev, &vars, &params, &config)?;
            let wv1 = g.constant(w1.clone());
            let wv2 = g.constant(w2.clone());
            let a = g.mul(out.q_new, wv1)?;
            let b = g.mul(out.q_new_pos, wv2)?;
            let s = g.add(a, b)?;
            Ok(g.sum_all(s))
        })
        .unwrap();
        assert!(max < FD_TOL, "aligner end-to-end FD mismatch: {max:.3e}");
    }

    #[test]
    fn aligner_is_deterministic() {
        let config = AlignerConfig { reweight: true, ..test_config(Strategy::Spm) };
        let (mut store, params) = setup(102, &config);
        randomize_point_head(&mut store, &params, 103);
        let rng = &mut Rng::seed_from_u64(104);
        let fmap = rand_map(rng, 6, 6, D);
        let run = || {
            let mut g = Graph::new();
            let out = forward(&mut g, &fmap, &store, &params, &config);
            (
                g.value(out.q_new).data().to_vec(),
                g.value(out.q_new_pos).data().to_vec(),
                g.value(out.points.rel).data().to_vec(),
            )
        };
        assert_eq!(run(), run(), "same inputs must give bitwise-identical outputs");
    }

    #[test]
    fn within_image_search_can_leave_the_box_and_samples_full_map() {
        let config = AlignerConfig {
            search_range: SearchRange::WithinImage,
            ..test_config(Strategy::Spm)
        };
        let (mut store, params) = setup(105, &config);
        // Push point logits strongly positive: absolute coords near (1, 1),
        // outside the first test box.
        for v in store.get_mut(params.mlp2_b).data_mut() {
            *v = 6.0;
        }
        let rng = &mut Rng::seed_from_u64(106);
        let fmap = rand_map(rng, 6, 6, D);
        let mut g = Graph::new();
        let out = forward(&mut g, &fmap, &store, &params, &config);
        let rel = g.value(out.points.rel).data();
        assert!(
            rel.iter().any(|&v| v > 1.0),
            "points near (1,1) must exceed box-relative bounds for box {:?}",
            test_boxes()[0]
        );
        for &v in g.value(out.points.abs).data() {
            assert!(v > 0.0 && v < 1.0, "absolute coords stay inside the image");
        }

        // Redirected sampling: output equals a point sample of the reduced
        // full map, bitwise.
        let full = out.region.full_reduced.expect("within-image mode keeps the full map");
        let direct = g
            .point_sample(full, out.points.abs, crate::graph::SampleMode::PixelCenter)
            .unwrap();
        let expect: Vec<f64> = g.value(direct).data().to_vec();
        assert_eq!(g.value(out.q_new).data(), expect.as_slice());
    }

    #[test]
    fn registration_validates_dimensions() {
        let rng = &mut Rng::seed_from_u64(107);
        let mut store = ParamStore::new();
        let bad_heads = AlignerConfig { head_count: 3, ..AlignerConfig::default() };
        assert!(AlignerParams::register(&mut store, rng, 16, &bad_heads, "a").is_err());
        let bad_width = AlignerConfig { head_count: 2, ..AlignerConfig::default() };
        assert!(
            AlignerParams::register(&mut store, rng, 20, &bad_width, "b").is_err(),
            "10-wide point slices are not embeddable"
        );
        let mismatched = AlignerConfig { head_count: 8, ..AlignerConfig::default() };
        let params =
            AlignerParams::register(&mut store, rng, 64, &AlignerConfig::default(), "c").unwrap();
        let mut g = Graph::new();
        let fv = g.constant(Tensor::zeros(&[6, 6, 64]).unwrap());
        let qp = g.constant(Tensor::zeros(&[2, 64]).unwrap());
        let vars = store.bind(&mut g, false);
        let two_heads = AlignerConfig { head_count: 2, ..mismatched };
        assert!(
            aligner_forward(&mut g, fv, &test_boxes(), qp, &vars, &params, &two_heads).is_err()
        );
    }
}
