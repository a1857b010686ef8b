//! Attention introspection: renders the final decoder layer's cross-attention
//! maps as PGM images and writes the salient-point sidecar.

use std::path::Path;

use samdetr_core::graph::Graph;
use samdetr_core::model::forward;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{normalize_to_bytes, points_sidecar, write_pgm};
use crate::scene::{generate_scene, SceneSample};
use crate::train::build_model;

/// What a dump produced.
#[derive(Debug)]
pub struct DumpSummary {
    /// PGM files written: one per (query, head) plus one mean map per query.
    pub maps: usize,
    /// Sidecar rows, `N * M` for aligned variants and 0 for the baseline.
    pub points: usize,
    /// The scene the maps were rendered for.
    pub scene: SceneSample,
}

/// Loads a checkpoint into the model described by `cfg`, runs one forward
/// pass on the scene generated from `scene_seed`, and writes per-(query,
/// head) attention maps `qQQ_hH.pgm`, per-query means `qQQ_mean.pgm`, and
/// `points.txt` into `out`.
pub fn dump_attention(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    scene_seed: u64,
    out: &Path,
) -> Result<DumpSummary> {
    let (mut store, params, mcfg) = build_model(cfg)?;
    checkpoint::load_into(&mut store, checkpoint_path)?;
    let scene = generate_scene(scene_seed, mcfg.image_side)?;
    std::fs::create_dir_all(out)?;

    let mut g = Graph::new();
    let vars = store.bind(&mut g, false);
    let output = forward(&mut g, &scene.image, &vars, &params, &mcfg)?;
    let last = output.last();

    let side = mcfg.feature_side();
    let keys = side * side;
    let (m, n) = (mcfg.m, mcfg.queries);
    let weights = g.value(last.cross_weights);
    if weights.shape() != [m, n, keys] {
        return Err(Error::format(
            "attention",
            format!("expected {m}x{n}x{keys} weights, got {:?}", weights.shape()),
        ));
    }

    let mut maps = 0;
    for q in 0..n {
        let mut mean = vec![0.0; keys];
        for h in 0..m {
            let start = (h * n + q) * keys;
            let map = &weights.data()[start..start + keys];
            for (acc, v) in mean.iter_mut().zip(map) {
                *acc += v / m as f64;
            }
            write_pgm(&out.join(format!("q{q:02}_h{h}.pgm")), side, side, &normalize_to_bytes(map))?;
            maps += 1;
        }
        write_pgm(&out.join(format!("q{q:02}_mean.pgm")), side, side, &normalize_to_bytes(&mean))?;
        maps += 1;
    }

    let mut rows = Vec::new();
    if let Some(points) = last.points {
        let pv = g.value(points);
        for q in 0..n {
            for h in 0..m {
                let at = (q * m + h) * 2;
                rows.push((q, h, pv.data()[at], pv.data()[at + 1]));
            }
        }
        std::fs::write(out.join("points.txt"), points_sidecar(&rows))?;
    }
    Ok(DumpSummary { maps, points: rows.len(), scene })
}
