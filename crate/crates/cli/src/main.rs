use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factrl::harness::{
    ensure_data, eval_stage, gen_data, load_policy, policy_path, render_markdown, rlhf_stage, rm_stage, run_matrix,
    sft_stage, write_report, RunConfig, RunDir, Technique,
};
use factrl::numeric::NumericError;
use factrl::Error;

#[derive(Parser)]
#[command(
    name = "factrl",
    version,
    about = "Fine-grained factuality RLHF in a synthetic QA world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `run_dir` from the configuration.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Stage {
    #[command(flatten)]
    common: Common,
    /// Seed to run; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the world and the supervised, RL and evaluation datasets.
    GenData(Common),
    /// Supervised fine-tuning on demonstrations.
    Sft(Stage),
    /// Train the reward model of the configured granularity.
    TrainRm(Stage),
    /// PPO from the supervised checkpoint; resumes if interrupted.
    Rlhf(Stage),
    /// Evaluate a technique's policy on the held-out samples.
    Eval {
        #[command(flatten)]
        stage: Stage,
        /// Technique whose checkpoint to evaluate, e.g. `sft` or
        /// `rlhf-subclaim-seq`.
        #[arg(long, default_value = "sft")]
        technique: String,
    },
    /// Every configured technique for every seed, then the report.
    Matrix(Common),
    /// Render the report from the rows evaluated so far.
    Report(Common),
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let text = match &c.config {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut cfg = RunConfig::from_toml(&text, &c.overrides)?;
    if let Some(d) = &c.run_dir {
        cfg.run_dir = d.clone();
    }
    Ok(cfg)
}

fn open(c: &Common) -> Result<(RunConfig, RunDir), Error> {
    let cfg = load_config(c)?;
    let mut dir = RunDir::open(&cfg.run_dir)?;
    dir.bind_config(&cfg)?;
    Ok((cfg, dir))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, mut dir) = open(&c)?;
            gen_data(&cfg, &mut dir)
        }
        Command::Sft(s) => {
            let (cfg, mut dir) = open(&s.common)?;
            let seed = s.seed.unwrap_or(cfg.seeds[0]);
            sft_stage(&cfg, &mut dir, seed).map(drop)
        }
        Command::TrainRm(s) => {
            let (cfg, mut dir) = open(&s.common)?;
            let seed = s.seed.unwrap_or(cfg.seeds[0]);
            let sft = sft_stage(&cfg, &mut dir, seed)?;
            rm_stage(&cfg, &mut dir, seed, cfg.granularity(), &sft).map(drop)
        }
        Command::Rlhf(s) => {
            let (cfg, mut dir) = open(&s.common)?;
            let seed = s.seed.unwrap_or(cfg.seeds[0]);
            let sft = sft_stage(&cfg, &mut dir, seed)?;
            rlhf_stage(&cfg, &mut dir, seed, cfg.granularity(), &sft).map(drop)
        }
        Command::Eval { stage, technique } => {
            let (cfg, mut dir) = open(&stage.common)?;
            let seed = stage.seed.unwrap_or(cfg.seeds[0]);
            let t = Technique::parse(&technique)?;
            ensure_data(&cfg, &mut dir)?;
            let policy = load_policy(&dir, &policy_path(seed, t))?;
            let row = eval_stage(&cfg, &mut dir, seed, &technique, &policy)?;
            println!("{}", serde_json::to_string(&row)?);
            Ok(())
        }
        Command::Matrix(c) => {
            let cfg = load_config(&c)?;
            let mut dir = RunDir::open(&cfg.run_dir)?;
            let rows = run_matrix(&cfg, &mut dir)?;
            print!("{}", render_markdown(&rows));
            Ok(())
        }
        Command::Report(c) => {
            let cfg = load_config(&c)?;
            let mut dir = RunDir::open(&cfg.run_dir)?;
            let rows = write_report(&mut dir)?;
            print!("{}", render_markdown(&rows));
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Numeric(NumericError::Checkpoint(_)) => 4,
        Error::Manifest(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
