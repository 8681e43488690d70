use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmadapt::config::{ExperimentConfig, StageSelect};
use mmadapt::experiment::{self, RunOptions};
use mmadapt::Result;

#[derive(Parser)]
#[command(name = "mmadapt", version, about = "Desk-scale multimodal adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and/or fine-tune, then evaluate.
    Train(Common),
    /// Sweep the visual/language rank split plus a plain LoRA baseline.
    AblateRank {
        #[command(flatten)]
        common: Common,
        /// Comma-separated β values; defaults to the config's grid.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Sweep the number of ladder queries plus a no-ladder baseline.
    AblateQueries {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        queries: Option<Vec<usize>>,
    },
    /// Finite-difference audit of every trainable group (tiny model by default).
    GradCheck(Common),
    /// Export attention maps from a checkpoint.
    AttnExport(Common),
    /// Parameter counts and rank-split parity.
    ParamAudit(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    #[arg(long, action = clap::ArgAction::Set)]
    arcana_star: Option<bool>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Finetune,
    Both,
}

impl Common {
    fn resolve(&self, fallback: fn() -> ExperimentConfig) -> Result<(ExperimentConfig, RunOptions)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => fallback(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output.directory = o.clone();
        }
        if let Some(s) = self.stage {
            cfg.train.stage = match s {
                StageArg::Pretrain => StageSelect::Pretrain,
                StageArg::Finetune => StageSelect::Finetune,
                StageArg::Both => StageSelect::Both,
            };
        }
        if let Some(a) = self.arcana_star {
            cfg.train.arcana_star = a;
        }
        cfg.validate()?;
        let opts = RunOptions {
            checkpoint: self.checkpoint.clone(),
            parallel: self.parallel,
            fault: None,
        };
        Ok((cfg, opts))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, opts) = c.resolve(ExperimentConfig::default)?;
            let r = experiment::cmd_train(&cfg, &opts)?;
            if let Some(e) = r.eval {
                println!("accuracy {:.4}  eval loss {:.4}", e.accuracy, e.mean_loss);
            }
            println!("trainable {}  frozen {}", r.params.trainable, r.params.frozen);
        }
        Command::AblateRank { common, betas } => {
            let (cfg, opts) = common.resolve(ExperimentConfig::default)?;
            let betas = betas.unwrap_or_else(|| cfg.ablation.betas.clone());
            let r = experiment::cmd_ablate_rank(&cfg, &betas, &opts)?;
            print!("{}", experiment::ablation_csv(&r.rows));
        }
        Command::AblateQueries { common, queries } => {
            let (cfg, opts) = common.resolve(ExperimentConfig::default)?;
            let queries = queries.unwrap_or_else(|| cfg.ablation.queries.clone());
            let r = experiment::cmd_ablate_queries(&cfg, &queries, &opts)?;
            print!("{}", experiment::ablation_csv(&r.rows));
        }
        Command::GradCheck(c) => {
            let (cfg, opts) = c.resolve(ExperimentConfig::tiny)?;
            let r = experiment::cmd_grad_check(&cfg, &opts)?;
            for g in &r.groups {
                if g.empty {
                    println!("{:<20} empty", g.group);
                } else {
                    println!(
                        "{:<20} {:>3} entries  max rel err {:.3e}  max |grad| {:.3e}",
                        g.group, g.entries, g.max_rel_err, g.max_abs_grad
                    );
                }
            }
            println!("pass: max rel err {:.3e} < {:.0e}", r.max_rel_err, r.tolerance);
        }
        Command::AttnExport(c) => {
            let (cfg, opts) = c.resolve(ExperimentConfig::default)?;
            let r = experiment::cmd_attn_export(&cfg, &opts)?;
            println!("{}", experiment::MASS_HEADER);
            for e in &r.exports {
                for (l, (v, t)) in e.mass.iter().enumerate() {
                    println!("{},{l},{v:.6},{t:.6}", e.variant.name());
                }
            }
        }
        Command::ParamAudit(c) => {
            let (cfg, _) = c.resolve(ExperimentConfig::default)?;
            let a = experiment::cmd_param_audit(&cfg)?;
            for (g, n) in &a.groups {
                println!("{:<14} {n}", g.name());
            }
            println!("beta,gamma,mm_lora,plain_lora,equal");
            for p in &a.parity {
                let mm = p.mm_lora_params.map_or("-".to_string(), |n| n.to_string());
                println!("{},{},{mm},{},{}", p.beta, p.gamma, p.plain_lora_params, p.equal);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ARC_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
