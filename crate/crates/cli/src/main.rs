use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use guda::pipeline::{self, PipelineConfig, RunDir, Stage};
use guda::Error;

const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Parser)]
#[command(name = "guda", version, about = "Cross-lingual data selection and domain adaptation on a synthetic testbed")]
struct Cli {
    /// Configuration file; the bundled default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Replaces the configured seed everywhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for ablation cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Synth,
    Embed,
    Cluster,
    Align,
    Classify,
    Select,
    Adapt,
    Eval,
    /// All stages, the configured ablations and the report.
    Pipeline,
    Ablate {
        #[command(subcommand)]
        what: AblateCommand,
    },
    /// Summarize the stage outputs of a run directory.
    Report,
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Sweep the number of clusters used for negative filtering.
    K {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Adapt with each subset of the mixed loss.
    Losses,
}

fn load_config(cli: &Cli) -> guda::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::from_toml(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = cli.seed {
        cfg = PipelineConfig { seed, ..cfg }.resolved()?;
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> guda::Result<()> {
    let dir = RunDir::new(&cli.out);
    let stage = |s: Stage| pipeline::run_stage(s, cfg, &dir);
    match &cli.command {
        Command::Synth => stage(Stage::Synth),
        Command::Embed => stage(Stage::Embed),
        Command::Cluster => stage(Stage::Cluster),
        Command::Align => stage(Stage::Align),
        Command::Classify => stage(Stage::Classify),
        Command::Select => stage(Stage::Select),
        Command::Adapt => stage(Stage::Adapt),
        Command::Eval => stage(Stage::Eval),
        Command::Pipeline => {
            let s = pipeline::run_pipeline(cfg, &dir, cli.jobs)?;
            println!("BLEU base {:.2}, adapted {:.2}", s.eval.bleu_base, s.eval.bleu_adapted);
            for m in &s.select.methods {
                println!("precision@{} {}: {:.4}", s.select.k, m.method, m.precision_at_k);
            }
            Ok(())
        }
        Command::Ablate { what: AblateCommand::K { values } } => {
            let values = values.clone().unwrap_or_else(|| cfg.ablation.k_values.clone());
            for r in pipeline::ablate_k(cfg, &dir, &values, cli.jobs)? {
                println!("k={} retrieval {:.4} precision {:.4} bleu {:.2}", r.k, r.retrieval_p1, r.precision_at_k, r.bleu);
            }
            Ok(())
        }
        Command::Ablate { what: AblateCommand::Losses } => {
            for r in pipeline::ablate_losses(cfg, &dir, cli.jobs)? {
                println!("{} bleu {:.2}", r.subset, r.bleu);
            }
            Ok(())
        }
        Command::Report => {
            pipeline::report(cfg, &dir)?;
            println!("{}", dir.path("report/summary.csv").display());
            Ok(())
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::MissingArtifacts(_) | Error::Config(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
