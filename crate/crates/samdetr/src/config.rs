//! Run configuration: one flat set of training knobs resolved from defaults,
//! an optional `key = value` config file, and command-line overrides, in that
//! order.

use std::path::PathBuf;

use samdetr_core::aligner::{AlignerConfig, SearchRange, Strategy};
use samdetr_core::model::{ModelConfig, Variant};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub variant: Variant,
    pub strategy: Strategy,
    pub reweight: bool,
    pub search_range: SearchRange,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    /// Learning-rate multiplier for backbone parameters.
    pub backbone_lr_mult: f64,
    /// Step after which the learning rate drops by 10x; defaults to five
    /// sixths of the budget.
    pub decay_step: Option<usize>,
    pub batch: usize,
    pub eval_interval: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Sam,
            strategy: Strategy::Spm,
            reweight: true,
            search_range: SearchRange::WithinBox,
            seed: 0,
            steps: 2000,
            lr: 3e-4,
            backbone_lr_mult: 0.1,
            decay_step: None,
            batch: 4,
            eval_interval: 100,
            train_scenes: 500,
            val_scenes: 100,
            out: PathBuf::from("out"),
        }
    }
}

pub fn variant_from_str(s: &str) -> Result<Variant> {
    match s {
        "baseline" => Ok(Variant::Baseline),
        "sam" => Ok(Variant::Sam),
        "sam-smca" => Ok(Variant::SamSmca),
        _ => Err(Error::config(format!(
            "unknown variant {s:?}; expected baseline, sam, or sam-smca"
        ))),
    }
}

pub fn variant_to_str(v: Variant) -> &'static str {
    match v {
        Variant::Baseline => "baseline",
        Variant::Sam => "sam",
        Variant::SamSmca => "sam-smca",
    }
}

pub fn strategy_from_str(s: &str) -> Result<Strategy> {
    match s {
        "avg" => Ok(Strategy::Avg),
        "max" => Ok(Strategy::Max),
        "sp1" => Ok(Strategy::Sp1),
        "spm" => Ok(Strategy::Spm),
        _ => Err(Error::config(format!(
            "unknown strategy {s:?}; expected avg, max, sp1, or spm"
        ))),
    }
}

pub fn strategy_to_str(s: Strategy) -> &'static str {
    match s {
        Strategy::Avg => "avg",
        Strategy::Max => "max",
        Strategy::Sp1 => "sp1",
        Strategy::Spm => "spm",
    }
}

pub fn search_range_from_str(s: &str) -> Result<SearchRange> {
    match s {
        "box" => Ok(SearchRange::WithinBox),
        "image" => Ok(SearchRange::WithinImage),
        _ => Err(Error::config(format!("unknown search range {s:?}; expected box or image"))),
    }
}

pub fn search_range_to_str(s: SearchRange) -> &'static str {
    match s {
        SearchRange::WithinBox => "box",
        SearchRange::WithinImage => "image",
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("bad value {value:?} for {what}"));
        match key {
            "variant" => self.variant = variant_from_str(value)?,
            "strategy" => self.strategy = strategy_from_str(value)?,
            "reweight" => self.reweight = value.parse().map_err(|_| bad(key))?,
            "search_range" => self.search_range = search_range_from_str(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "steps" => self.steps = value.parse().map_err(|_| bad(key))?,
            "lr" => self.lr = value.parse().map_err(|_| bad(key))?,
            "backbone_lr_mult" => self.backbone_lr_mult = value.parse().map_err(|_| bad(key))?,
            "decay_step" => self.decay_step = Some(value.parse().map_err(|_| bad(key))?),
            "batch" => self.batch = value.parse().map_err(|_| bad(key))?,
            "eval_interval" => self.eval_interval = value.parse().map_err(|_| bad(key))?,
            "train_scenes" => self.train_scenes = value.parse().map_err(|_| bad(key))?,
            "val_scenes" => self.val_scenes = value.parse().map_err(|_| bad(key))?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file: flat `key = value` lines, `#` comments, blank
    /// lines allowed, unknown keys rejected.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected key = value", i + 1)));
            };
            self.apply_kv(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Serializes every knob in the same flat format the parser accepts.
    pub fn to_file_text(&self) -> String {
        format!(
            "variant = {}\nstrategy = {}\nreweight = {}\nsearch_range = {}\nseed = {}\n\
             steps = {}\nlr = {}\nbackbone_lr_mult = {}\ndecay_step = {}\nbatch = {}\n\
             eval_interval = {}\ntrain_scenes = {}\nval_scenes = {}\nout = {}\n",
            variant_to_str(self.variant),
            strategy_to_str(self.strategy),
            self.reweight,
            search_range_to_str(self.search_range),
            self.seed,
            self.steps,
            self.lr,
            self.backbone_lr_mult,
            self.decay_at(),
            self.batch,
            self.eval_interval,
            self.train_scenes,
            self.val_scenes,
            self.out.display()
        )
    }

    /// The step after which the learning rate is divided by 10.
    pub fn decay_at(&self) -> usize {
        self.decay_step.unwrap_or((self.steps * 5 / 6).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if let Some(d) = self.decay_step {
            if d == 0 || d >= self.steps {
                return Err(Error::config(format!(
                    "decay step {d} must lie in 1..{}",
                    self.steps
                )));
            }
        }
        if self.batch == 0 || self.eval_interval == 0 {
            return Err(Error::config("batch and eval_interval must be positive"));
        }
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::config("train and validation splits must be non-empty"));
        }
        if !(self.lr > 0.0) || self.backbone_lr_mult < 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        self.model_config().validate()?;
        Ok(())
    }

    /// The architecture this run trains: stock shape, with the run's variant
    /// and aligner settings applied.
    pub fn model_config(&self) -> ModelConfig {
        let base = ModelConfig::default();
        ModelConfig {
            variant: self.variant,
            aligner: AlignerConfig {
                strategy: self.strategy,
                head_count: base.m,
                reweight: self.reweight,
                search_range: self.search_range,
            },
            ..base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_decay_at_five_sixths() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.decay_at(), 1666, "5/6 of 2000 steps");
        assert_eq!(RunConfig { steps: 1, ..cfg }.decay_at(), 1);
    }

    #[test]
    fn file_text_round_trips_every_key() {
        let mut cfg = RunConfig::default();
        cfg.apply_file_text(
            "# comment\n\
             variant = sam-smca\n\
             strategy = sp1\n\
             reweight = false\n\
             search_range = image\n\
             \n\
             seed = 9\n\
             steps = 60\n\
             lr = 0.001\n\
             backbone_lr_mult = 0.5\n\
             decay_step = 50\n\
             batch = 2\n\
             eval_interval = 10\n\
             train_scenes = 8\n\
             val_scenes = 4\n\
             out = runs/demo\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::SamSmca);
        assert_eq!(cfg.strategy, Strategy::Sp1);
        assert!(!cfg.reweight);
        assert_eq!(cfg.search_range, SearchRange::WithinImage);
        assert_eq!((cfg.seed, cfg.steps, cfg.batch), (9, 60, 2));
        assert_eq!(cfg.decay_at(), 50);
        assert_eq!(cfg.out, PathBuf::from("runs/demo"));
        let mut reparsed = RunConfig::default();
        reparsed.apply_file_text(&cfg.to_file_text()).unwrap();
        assert_eq!(cfg.to_file_text(), reparsed.to_file_text(), "serialization round-trip");
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_file_text("warmup = 5\n").unwrap_err();
        assert!(err.to_string().contains("warmup"), "unexpected error: {err}");
        let err = cfg.apply_file_text("steps 60\n").unwrap_err();
        assert!(err.to_string().contains("key = value"), "unexpected error: {err}");
    }

    #[test]
    fn later_settings_override_earlier_ones() {
        let mut cfg = RunConfig::default();
        cfg.apply_file_text("seed = 1\nsteps = 10\n").unwrap();
        cfg.apply_kv("seed", "2").unwrap();
        assert_eq!(cfg.seed, 2, "the command line wins over the file");
        assert_eq!(cfg.steps, 10);
    }

    #[test]
    fn validation_rejects_bad_budgets() {
        let ok = RunConfig::default();
        assert!(RunConfig { steps: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { decay_step: Some(10), steps: 10, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { decay_step: Some(0), ..ok.clone() }.validate().is_err());
        assert!(RunConfig { batch: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { val_scenes: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { lr: 0.0, ..ok }.validate().is_err());
    }

    #[test]
    fn model_config_mirrors_run_settings() {
        let mut cfg = RunConfig::default();
        cfg.apply_kv("variant", "baseline").unwrap();
        cfg.apply_kv("strategy", "max").unwrap();
        cfg.apply_kv("reweight", "false").unwrap();
        let mc = cfg.model_config();
        assert_eq!(mc.variant, Variant::Baseline);
        assert_eq!(mc.aligner.strategy, Strategy::Max);
        assert!(!mc.aligner.reweight);
        assert_eq!(mc.d, ModelConfig::default().d, "architecture stays stock");
    }
}
