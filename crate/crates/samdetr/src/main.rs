//! Command-line front end: train, evaluate, ablate, render attention maps,
//! and run the gradient verification suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use samdetr::ablate::ablate;
use samdetr::config::RunConfig;
use samdetr::dump::dump_attention;
use samdetr::error::Result;
use samdetr::formats::fmt_sig9;
use samdetr::gradcheck::run_gradient_suite;
use samdetr::train::{build_model, evaluate_model, train, val_split, RealClock};

#[derive(Parser)]
#[command(
    name = "samdetr",
    version,
    about = "Semantics-aligned detection queries on a synthetic shapes benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Config file of flat `key = value` lines; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant: baseline | sam | sam-smca.
    #[arg(long)]
    variant: Option<String>,
    /// Feature sampling strategy: avg | max | sp1 | spm.
    #[arg(long)]
    strategy: Option<String>,
    /// Disable query reweighting.
    #[arg(long)]
    no_reweight: bool,
    /// Salient point search range: box | image.
    #[arg(long)]
    search_range: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    /// Defaults, then the config file, then explicit flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file_text(&std::fs::read_to_string(path)?)?;
        }
        if let Some(v) = &self.variant {
            cfg.apply_kv("variant", v)?;
        }
        if let Some(v) = &self.strategy {
            cfg.apply_kv("strategy", v)?;
        }
        if self.no_reweight {
            cfg.reweight = false;
        }
        if let Some(v) = &self.search_range {
            cfg.apply_kv("search_range", v)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.eval_interval {
            cfg.eval_interval = v;
        }
        if let Some(v) = self.train_scenes {
            cfg.train_scenes = v;
        }
        if let Some(v) = self.val_scenes {
            cfg.val_scenes = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run and write metrics.csv, model.ckpt, and config.txt.
    Train(RunArgs),
    /// Evaluate a checkpoint on the run's validation split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to load; defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every mechanism arm under one shared budget; write ablation.csv.
    Ablate(RunArgs),
    /// Render final-layer attention maps and salient points for one scene.
    DumpAttention {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to load; defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene generator seed to render.
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        /// Where to write the maps; defaults to <out>/attention.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every op and the end-to-end model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cmd: &Cmd) -> Result<bool> {
    match cmd {
        Cmd::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = train(&cfg, &mut RealClock::new())?;
            let last = outcome.final_row();
            println!(
                "step {}: train_loss {} val_ap50 {} ({} ms)",
                last.step,
                fmt_sig9(last.train_loss),
                fmt_sig9(last.val_ap50),
                last.wall_ms
            );
            println!("artifacts in {}", cfg.out.display());
            Ok(true)
        }
        Cmd::Eval { run, checkpoint } => {
            let cfg = run.resolve()?;
            let path = checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"));
            let (mut store, params, mcfg) = build_model(&cfg)?;
            samdetr::checkpoint::load_into(&mut store, &path)?;
            let ap = evaluate_model(&store, &params, &mcfg, &val_split(&cfg)?)?;
            println!("val_ap50 {}", fmt_sig9(ap));
            Ok(true)
        }
        Cmd::Ablate(args) => {
            let cfg = args.resolve()?;
            for r in &ablate(&cfg)? {
                println!(
                    "{}: train_loss {} val_ap50 {}",
                    r.name,
                    fmt_sig9(r.final_train_loss),
                    fmt_sig9(r.final_val_ap50)
                );
            }
            println!("comparative CSV in {}", cfg.out.join("ablation.csv").display());
            Ok(true)
        }
        Cmd::DumpAttention { run, checkpoint, scene_seed, dump_dir } => {
            let cfg = run.resolve()?;
            let path = checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"));
            let dir = dump_dir.clone().unwrap_or_else(|| cfg.out.join("attention"));
            let summary = dump_attention(&cfg, &path, *scene_seed, &dir)?;
            println!(
                "wrote {} maps and {} salient points to {}",
                summary.maps,
                summary.points,
                dir.display()
            );
            Ok(true)
        }
        Cmd::Gradcheck { seed } => {
            let reports = run_gradient_suite(*seed)?;
            let mut ok = true;
            for r in &reports {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!("{status}  {:<22} max_rel {:.3e} (tol {:.0e})", r.name, r.max_rel, r.tol);
                ok &= r.passed();
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
