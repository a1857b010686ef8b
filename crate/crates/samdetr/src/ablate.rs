//! Ablation harness: trains every mechanism arm under one shared budget and
//! seed, then writes a single comparative CSV.

use samdetr_core::aligner::Strategy;
use samdetr_core::model::Variant;

use crate::config::RunConfig;
use crate::error::Result;
use crate::formats::fmt_sig9;
use crate::train::{train, RealClock};

/// Header of `ablation.csv`.
pub const ABLATION_HEADER: &str = "arm,final_train_loss,final_val_ap50";

struct Arm {
    name: &'static str,
    variant: Variant,
    strategy: Strategy,
    reweight: bool,
}

const ARMS: [Arm; 6] = [
    Arm { name: "baseline", variant: Variant::Baseline, strategy: Strategy::Spm, reweight: false },
    Arm { name: "avg", variant: Variant::Sam, strategy: Strategy::Avg, reweight: false },
    Arm { name: "max", variant: Variant::Sam, strategy: Strategy::Max, reweight: false },
    Arm { name: "sp1", variant: Variant::Sam, strategy: Strategy::Sp1, reweight: false },
    Arm { name: "spm", variant: Variant::Sam, strategy: Strategy::Spm, reweight: false },
    Arm { name: "spm_rw", variant: Variant::Sam, strategy: Strategy::Spm, reweight: true },
];

/// One arm's end-of-run numbers.
pub struct ArmResult {
    pub name: &'static str,
    pub final_train_loss: f64,
    pub final_val_ap50: f64,
}

/// Names of the arms, in the order they run and appear in the CSV.
pub fn arm_names() -> Vec<&'static str> {
    ARMS.iter().map(|a| a.name).collect()
}

/// The run configuration an arm derives from a shared base.
pub fn arm_config(base: &RunConfig, name: &str) -> Option<RunConfig> {
    let arm = ARMS.iter().find(|a| a.name == name)?;
    Some(RunConfig {
        variant: arm.variant,
        strategy: arm.strategy,
        reweight: arm.reweight,
        out: base.out.join(arm.name),
        ..base.clone()
    })
}

/// Trains all arms sequentially from one base config (same seed, same budget,
/// same splits) and writes `ablation.csv` under the base output directory.
pub fn ablate(base: &RunConfig) -> Result<Vec<ArmResult>> {
    base.validate()?;
    std::fs::create_dir_all(&base.out)?;
    let mut results = Vec::with_capacity(ARMS.len());
    for arm in &ARMS {
        let cfg = arm_config(base, arm.name).expect("arm table names itself");
        let outcome = train(&cfg, &mut RealClock::new())?;
        let last = outcome.final_row();
        results.push(ArmResult {
            name: arm.name,
            final_train_loss: last.train_loss,
            final_val_ap50: last.val_ap50,
        });
    }
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for r in &results {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.name,
            fmt_sig9(r.final_train_loss),
            fmt_sig9(r.final_val_ap50)
        ));
    }
    std::fs::write(base.out.join("ablation.csv"), csv)?;
    Ok(results)
}
