//! Gradient verification suite: finite-difference checks for every graph op
//! plus an end-to-end micro model, reported one line per check.

use rand_core::SeedableRng;
use samdetr_core::aligner::AlignerConfig;
use samdetr_core::geometry::BBox;
use samdetr_core::gradcheck::{fd_max_rel, run_op_suite, FD_TOL};
use samdetr_core::graph::Graph;
use samdetr_core::matching::{detection_loss, match_queries, LossWeights};
use samdetr_core::model::{
    boxes_from_rows, detached_probs, forward, ModelConfig, ModelParams, Variant,
};
use samdetr_core::nn::{uniform, ParamStore};
use samdetr_core::tensor::Tensor;

use crate::error::Result;

type Rng = rand_chacha::ChaCha8Rng;

/// Looser bound for the composed model, where finite-difference noise from
/// hundreds of chained ops accumulates.
pub const E2E_TOL: f64 = 1e-3;

/// One finite-difference comparison and the bound it must meet.
pub struct CheckReport {
    pub name: String,
    pub max_rel: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tol
    }
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        m: 2,
        queries: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        classes: 2,
        image_side: 16,
        stride: 8,
        variant: Variant::SamSmca,
        aligner: AlignerConfig { head_count: 2, ..AlignerConfig::default() },
    }
}

fn end_to_end_check(seed: u64) -> Result<f64> {
    let cfg = micro_config();
    let mut store = ParamStore::new();
    let rng = &mut Rng::seed_from_u64(seed);
    let params = ModelParams::register(&mut store, rng, &cfg)?;
    // The salient-point MLP output layer starts at zero; randomize it so
    // point gradients are alive at the evaluation point.
    let ap = params.dec[0].aligner.as_ref().expect("aligned variant");
    for (id, scale) in [(ap.mlp2_w, 0.8), (ap.mlp2_b, 0.4)] {
        for v in store.get_mut(id).data_mut() {
            *v = uniform(rng, -scale, scale);
        }
    }
    let image = Tensor::from_fn(&[3, 16, 16], |_| uniform(rng, 0.0, 1.0))?;
    // Coordinates sit away from the initial predictions so no L1 or GIoU
    // kink coincides with the evaluation point.
    let gts =
        [(0usize, BBox::new(0.5, 0.52, 0.37, 0.45)), (1usize, BBox::new(0.3, 0.3, 0.25, 0.31))];
    // Freeze the assignment so differentiation never crosses a matching flip.
    let matching = {
        let mut g = Graph::new();
        let vars = store.bind(&mut g, false);
        let out = forward(&mut g, &image, &vars, &params, &cfg)?;
        let probs = detached_probs(g.value(out.layers[0].logits));
        let boxes = boxes_from_rows(g.value(out.layers[0].boxes))?;
        match_queries(&probs, &boxes, &gts)?
    };
    // One probe tensor per architectural block; reference boxes are excluded
    // because the sampling path treats them as fixed geometry.
    let smca = params.dec[0].smca.expect("smca variant");
    let probe_ids = [
        params.backbone[0].1,
        params.enc[0].attn.wq,
        ap.reduce_w,
        ap.mlp2_w,
        ap.rw1,
        smca.0,
        params.final_heads.class_w,
        params.final_heads.box_b3,
    ];
    let probes: Vec<Tensor> = probe_ids.iter().map(|id| store.get(*id).clone()).collect();
    let max = fd_max_rel(&probes, |g, v| {
        let mut vars = store.bind(g, false);
        for (id, &var) in probe_ids.iter().zip(v) {
            vars[id.index()] = var;
        }
        let out = forward(g, &image, &vars, &params, &cfg)?;
        let layer = &out.layers[0];
        detection_loss(g, layer.logits, layer.boxes, &gts, &matching, &LossWeights::default())
    })?;
    Ok(max)
}

/// Runs every gradient check and returns one report per check. Deterministic
/// in `seed`.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports: Vec<CheckReport> = run_op_suite(seed)?
        .into_iter()
        .map(|r| CheckReport { name: r.op.to_string(), max_rel: r.max_rel, tol: FD_TOL })
        .collect();
    reports.push(CheckReport {
        name: "model_end_to_end".to_string(),
        max_rel: end_to_end_check(seed ^ 0x5eed)?,
        tol: E2E_TOL,
    });
    Ok(reports)
}
