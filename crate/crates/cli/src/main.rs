use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use basn::pipeline::{
    cmd_embed, cmd_evaluate, cmd_extract, cmd_train, CodecOverrides, EmbedRequest, EvaluateRequest, ExtractRequest,
    ModelSet, RunConfig, Stage,
};
use basn::BasnError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "basn", version, about = "Attention-driven bit-plane steganography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct Knobs {
    /// `Min`, `Mean`, or a full name such as `Mean-LSM-1-PS-1.2`.
    #[arg(long)]
    strategy: Option<String>,
    /// Lowest bit planes left untouched.
    #[arg(long)]
    lsm: Option<u8>,
    #[arg(long)]
    ps_seed: Option<u64>,
    /// Permutative straddling budget in bits per pixel.
    #[arg(long)]
    ps_limit_bpp: Option<f64>,
}

impl Knobs {
    fn overrides(&self) -> CodecOverrides {
        CodecOverrides {
            strategy: self.strategy.clone(),
            lsm_k: self.lsm,
            ps_seed: self.ps_seed,
            ps_limit_bpp: self.ps_limit_bpp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Default)]
enum Models {
    #[default]
    Auto,
    Base,
    Finetuned,
}

impl From<Models> for ModelSet {
    fn from(m: Models) -> Self {
        match m {
            Models::Auto => ModelSet::Auto,
            Models::Base => ModelSet::Base,
            Models::Finetuned => ModelSet::Finetuned,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the default desk-scale configuration.
    InitConfig {
        #[arg(long)]
        output: PathBuf,
        /// Directory for checkpoints, logs and reports.
        #[arg(long, default_value = "runs/toy")]
        output_dir: PathBuf,
    },
    /// Train the selected stages, saving a checkpoint after each.
    Train {
        #[command(flatten)]
        common: Common,
        /// `all`, `itc-only`, or a comma-separated list of stages.
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Hide a payload file in a cover image.
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        knobs: Knobs,
        #[arg(long)]
        cover: PathBuf,
        #[arg(long)]
        payload: PathBuf,
        /// Stego image, must be PNG.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        models: Models,
    },
    /// Recover a payload from a stego image.
    Extract {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        knobs: Knobs,
        #[arg(long)]
        stego: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Original payload; prints the bit stream error rate.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Use the sender's capacity map instead of recomputing attention.
        #[arg(long)]
        oracle_plan: bool,
        #[arg(long, value_enum, default_value_t)]
        models: Models,
    },
    /// Strategy table, detector ROC/AUC and feature distortion reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        knobs: Knobs,
        /// Folder of PNG covers; the held-out split by default.
        #[arg(long)]
        covers: Option<PathBuf>,
        /// Strategy to evaluate, repeatable; replaces the configured list.
        #[arg(long = "eval-strategy")]
        eval_strategy: Vec<String>,
    },
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::InitConfig { output, output_dir } => {
            RunConfig::toy(output_dir).save(&output)?;
            println!("wrote {}", output.display());
        }
        Command::Train { common, stages } => {
            let cfg = load(&common)?;
            let report = cmd_train(&cfg, &Stage::parse_selection(&stages)?)?;
            for o in &report.outcomes {
                println!("{}\t{}\t{}", o.stage, o.digest, o.checkpoint.display());
            }
        }
        Command::Embed {
            common,
            knobs,
            cover,
            payload,
            output,
            models,
        } => {
            let cfg = load(&common)?;
            let r = cmd_embed(
                &cfg,
                &EmbedRequest {
                    cover,
                    payload,
                    output: output.clone(),
                    overrides: knobs.overrides(),
                    models: models.into(),
                },
            )?;
            let m = &r.manifest;
            println!("strategy\t{}", m.strategy);
            println!("payload_bits\t{}", m.payload_bits);
            println!("payload_bpp\t{:.6}", m.payload_bpp);
            println!("capacity_bpp\t{:.6}", m.capacity_bpp);
            println!("stego\t{}", output.display());
            println!("manifest\t{}", r.manifest_path.display());
        }
        Command::Extract {
            common,
            knobs,
            stego,
            output,
            reference,
            oracle_plan,
            models,
        } => {
            let cfg = load(&common)?;
            let r = cmd_extract(
                &cfg,
                &ExtractRequest {
                    stego,
                    output,
                    reference,
                    overrides: knobs.overrides(),
                    oracle_plan,
                    models: models.into(),
                },
            )?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("strategy\t{}", r.strategy);
            match (&r.payload, &r.decode_error) {
                (Some(p), _) => println!("payload_bytes\t{}", p.len()),
                (None, Some(e)) => println!("decode_error\t{e}"),
                (None, None) => {}
            }
            if let Some(b) = r.bser {
                println!("bser_pct\t{b:.6}");
            }
        }
        Command::Evaluate {
            common,
            knobs,
            covers,
            eval_strategy,
        } => {
            let cfg = load(&common)?;
            let r = cmd_evaluate(
                &cfg,
                &EvaluateRequest {
                    covers,
                    strategies: (!eval_strategy.is_empty()).then_some(eval_strategy),
                    overrides: knobs.overrides(),
                },
            )?;
            println!("models\tstrategy\tbser_pct\tpayload_bpp\tfeature_distortion_pct");
            for s in &r.strategies {
                let fd = s.feature_distortion_pct.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into());
                println!("{}\t{}\t{:.4}\t{:.4}\t{fd}", s.models, s.strategy, s.bser_pct, s.payload_bpp);
            }
            println!("scenario\tdetector\tauc");
            for d in &r.detectors {
                println!("{}\t{}\t{:.4}", d.scenario, d.detector.name(), d.auc);
            }
            println!("reports\t{}", r.report_dir.display());
        }
    }
    Ok(())
}

/// 2 for bad arguments, 3 for missing prerequisites, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<BasnError>() {
        Some(BasnError::InvalidArgument(_) | BasnError::Config(_)) => 2,
        Some(BasnError::Precondition(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
