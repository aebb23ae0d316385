use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mjkd_da::pipeline::{
    self, parse_proportion, run_all, stage_adapt, stage_evaluate, stage_generate, stage_pretrain, stage_select,
    stage_theory_check, sweep_proportion, sweep_table, ExitStatus, PipelineError, SweepRow, DEFAULT_PROPORTIONS,
};
use mjkd_da::PipelineConfig;

#[derive(Parser)]
#[command(name = "mjkd", version, about = "Select-and-adapt domain adaptation on synthetic benchmarks")]
struct Cli {
    /// Pipeline config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed (replaces the config's seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (replaces the config's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite an existing output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config in normalized form.
    Config,
    /// Write the seed's source, target and held target labels.
    Generate,
    /// Train on the labeled source and save the pretrained checkpoint.
    Pretrain,
    /// Rank targets by relative MJKD and write the selection table.
    Select {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Adversarial training on the source plus promoted targets.
    Adapt {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Target accuracy before and after adaptation, plus embedding dump.
    Evaluate,
    /// Optimal-discriminator and JSD report on binned network outputs.
    TheoryCheck,
    /// Every stage for every seed, then a summary table.
    Run,
    /// Full runs for each selection proportion.
    Sweep {
        /// Comma-separated proportions; fractions like 1/20 are accepted.
        #[arg(long, value_delimiter = ',')]
        proportions: Option<Vec<String>>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.output = out.clone();
    }
    Ok(config)
}

fn single_seed(config: &PipelineConfig) -> u64 {
    config.seeds[0]
}

fn execute(cli: &Cli) -> Result<ExitStatus, PipelineError> {
    let config = load_config(cli)?;
    let seed = single_seed(&config);
    let dir = config.seed_dir(seed);
    match &cli.command {
        Command::Config => print!("{}", config.to_text()),
        Command::Generate => {
            pipeline::prepare_output(&dir, cli.force)?;
            let data = stage_generate(&config, seed, &dir)?;
            println!("wrote {} source and {} target rows to {}", data.source.len(), data.target.len(), dir.display());
        }
        Command::Pretrain => {
            stage_pretrain(&config, seed, &dir)?;
            print!("{}", fs::read_to_string(dir.join(pipeline::files::PRETRAIN_LOG)).unwrap_or_default());
        }
        Command::Select { round } => {
            let report = stage_select(&config, &dir, *round, config.selection.proportion)?;
            println!(
                "k={} promoted={} shortfall={:?}",
                report.k,
                report.promoted.len(),
                report.shortfall()
            );
        }
        Command::Adapt { round } => {
            stage_adapt(&config, seed, &dir, *round)?;
            print!("{}", fs::read_to_string(dir.join(pipeline::files::adapt_log(*round))).unwrap_or_default());
        }
        Command::Evaluate => print!("{}", stage_evaluate(&config, seed, &dir)?.to_text()),
        Command::TheoryCheck => print!("{}", stage_theory_check(&config, seed, &dir)?.to_text()),
        Command::Run => {
            let summary = run_all(&config, cli.force)?;
            print!("{}", summary.to_text());
            return Ok(summary.status());
        }
        Command::Sweep { proportions } => {
            let list = match proportions {
                Some(items) => items
                    .iter()
                    .map(|p| parse_proportion(p))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|message| PipelineError::Config { line: 0, message })?,
                None => DEFAULT_PROPORTIONS.to_vec(),
            };
            let rows = sweep_proportion(&config, &list, cli.force)?;
            print!("{}", sweep_table(&rows));
            return Ok(SweepRow::status(&rows));
        }
    }
    Ok(ExitStatus::Success)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match execute(&cli) {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitStatus::ConfigError
            } else {
                ExitStatus::TrainingFailure
            }
        }
    };
    ExitCode::from(status.code() as u8)
}
