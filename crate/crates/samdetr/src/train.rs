//! Training harness: deterministic scene splits derived from the run seed,
//! batched gradient steps with AdamW, a 10x learning-rate drop late in the
//! budget, periodic validation AP, and the run artifacts (metrics CSV,
//! checkpoint, resolved config).

use std::path::PathBuf;
use std::time::Instant;

use rand_core::{RngCore, SeedableRng};
use samdetr_core::graph::{Graph, Var};
use samdetr_core::matching::LossWeights;
use samdetr_core::model::{
    boxes_from_rows, forward, total_detection_loss, ModelConfig, ModelParams,
};
use samdetr_core::nn::ParamStore;

use crate::ap::{detections, evaluate_ap50};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{metrics_to_csv, MetricsRow};
use crate::optim::AdamW;
use crate::scene::{generate_scene, SceneSample};

type Rng = rand_chacha::ChaCha8Rng;

const WEIGHT_DECAY: f64 = 1e-4;

/// Wall-clock source. Injected so determinism checks can pin it; training
/// math never depends on it.
pub trait Clock {
    /// Milliseconds since the run started.
    fn now_ms(&mut self) -> u64;
}

pub struct RealClock(Instant);

impl RealClock {
    pub fn new() -> Self {
        RealClock(Instant::now())
    }
}

impl Default for RealClock {
    fn default() -> Self {
        RealClock::new()
    }
}

impl Clock for RealClock {
    fn now_ms(&mut self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

/// Fake clock advancing a fixed amount per reading.
pub struct TickClock {
    t: u64,
    dt: u64,
}

impl TickClock {
    pub fn new(dt: u64) -> Self {
        TickClock { t: 0, dt }
    }
}

impl Clock for TickClock {
    fn now_ms(&mut self) -> u64 {
        self.t += self.dt;
        self.t
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(domain, index)` under one run seed, so
/// parameter init, the two splits, and batch sampling never share a stream.
pub fn sub_seed(seed: u64, domain: u64, index: u64) -> u64 {
    let mut state = seed;
    let mixed = splitmix64(&mut state);
    let mut state = mixed ^ domain;
    let mixed = splitmix64(&mut state);
    let mut state = mixed ^ index;
    splitmix64(&mut state)
}

const DOMAIN_PARAMS: u64 = 0;
const DOMAIN_TRAIN: u64 = 1;
const DOMAIN_VAL: u64 = 2;
const DOMAIN_BATCH: u64 = 3;

fn scenes(seed: u64, domain: u64, count: usize, side: usize) -> Result<Vec<SceneSample>> {
    (0..count).map(|i| generate_scene(sub_seed(seed, domain, i as u64), side)).collect()
}

/// The run's training split.
pub fn train_split(cfg: &RunConfig) -> Result<Vec<SceneSample>> {
    scenes(cfg.seed, DOMAIN_TRAIN, cfg.train_scenes, cfg.model_config().image_side)
}

/// The run's validation split.
pub fn val_split(cfg: &RunConfig) -> Result<Vec<SceneSample>> {
    scenes(cfg.seed, DOMAIN_VAL, cfg.val_scenes, cfg.model_config().image_side)
}

/// Builds the model for a run and registers its parameters.
pub fn build_model(cfg: &RunConfig) -> Result<(ParamStore, ModelParams, ModelConfig)> {
    let mcfg = cfg.model_config();
    let mut store = ParamStore::new();
    let rng = &mut Rng::seed_from_u64(sub_seed(cfg.seed, DOMAIN_PARAMS, 0));
    let params = ModelParams::register(&mut store, rng, &mcfg)?;
    store.set_lr_mult("backbone.", cfg.backbone_lr_mult);
    Ok((store, params, mcfg))
}

/// Validation AP50 of the current parameters over a scene set.
pub fn evaluate_model(
    store: &ParamStore,
    params: &ModelParams,
    mcfg: &ModelConfig,
    set: &[SceneSample],
) -> Result<f64> {
    let mut preds = Vec::with_capacity(set.len());
    let mut gts = Vec::with_capacity(set.len());
    for sample in set {
        let mut g = Graph::new();
        let vars = store.bind(&mut g, false);
        let out = forward(&mut g, &sample.image, &vars, params, mcfg)?;
        let last = out.last();
        let boxes = boxes_from_rows(g.value(last.boxes))?;
        preds.push(detections(g.value(last.logits), &boxes));
        gts.push(sample.gts.clone());
    }
    Ok(evaluate_ap50(&preds, &gts))
}

/// A finished run: its metrics rows and where the checkpoint landed.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
}

impl TrainOutcome {
    /// The last metrics row; every run has at least one.
    pub fn final_row(&self) -> &MetricsRow {
        self.metrics.last().expect("a finished run has at least one metrics row")
    }
}

/// Runs one training job to completion and writes `metrics.csv`,
/// `model.ckpt`, and the resolved `config.txt` into the output directory.
pub fn train(cfg: &RunConfig, clock: &mut dyn Clock) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let (mut store, params, mcfg) = build_model(cfg)?;
    let train_set = train_split(cfg)?;
    let val_set = val_split(cfg)?;
    let mut batch_rng = Rng::seed_from_u64(sub_seed(cfg.seed, DOMAIN_BATCH, 0));
    let mut opt = AdamW::new(&store, WEIGHT_DECAY);
    let weights = LossWeights::default();

    let mut rows = Vec::new();
    let (mut window_sum, mut window_len) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let mut g = Graph::new();
        let vars = store.bind(&mut g, true);
        // A diverged model can fail mid-forward (degenerate boxes in the
        // sampling path) before the loss itself goes non-finite; either way
        // the abort must name the offending step.
        let built = (|| {
            let mut batch_loss: Option<Var> = None;
            for _ in 0..cfg.batch {
                let pick = (batch_rng.next_u64() % train_set.len() as u64) as usize;
                let sample = &train_set[pick];
                let out = forward(&mut g, &sample.image, &vars, &params, &mcfg)?;
                let (loss, _) = total_detection_loss(&mut g, &out, &sample.gts, &weights)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            Ok(g.scale(batch_loss.expect("batch size is validated positive"), 1.0 / cfg.batch as f64))
        })();
        let loss = built.map_err(|e: Error| Error::train(format!("step {step}: {e}")))?;
        let loss_val = g.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(Error::train(format!(
                "training loss became non-finite at step {step}"
            )));
        }
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> =
            (0..store.len()).map(|i| g.grad_or_zeros(vars[i])).collect();
        let lr = if step > cfg.decay_at() { cfg.lr * 0.1 } else { cfg.lr };
        opt.step(&mut store, &grads, lr);

        window_sum += loss_val;
        window_len += 1;
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let val_ap50 = evaluate_model(&store, &params, &mcfg, &val_set)?;
            rows.push(MetricsRow {
                step,
                train_loss: window_sum / window_len as f64,
                val_ap50,
                wall_ms: clock.now_ms(),
            });
            window_sum = 0.0;
            window_len = 0;
        }
    }

    std::fs::write(cfg.out.join("metrics.csv"), metrics_to_csv(&rows))?;
    let ckpt = cfg.out.join("model.ckpt");
    checkpoint::save(&store, &ckpt)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_file_text())?;
    Ok(TrainOutcome { metrics: rows, checkpoint: ckpt })
}
