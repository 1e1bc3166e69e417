use clap::{Args, Parser, Subcommand};
use gfnadapt::config::ExperimentConfig;
use gfnadapt::experiment::{CommandOutcome, Experiment, ExperimentError};
use std::path::PathBuf;
use std::process::ExitCode;

/// Reward-proportional adaptation of crop simulator parameterizations.
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
#[derive(Debug, Parser)]
#[command(name = "gfnadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every terminal and export the landscape, basins and grid.
    Enumerate(Common),
    /// Train one policy per seed.
    Train(Common),
    /// Draw terminals from trained policies.
    Sample(Common),
    /// Run a baseline searcher (random or tpe) per seed.
    Baseline(Common),
    /// Build retrieval and fidelity reports from prior outputs.
    Report(Common),
    /// Print the resolved configuration and its hash.
    Config(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set reward.beta=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (run.out_dir).
    #[arg(long)]
    out: Option<String>,
    /// Comma-separated seeds (run.seeds).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// gflownet, random or tpe (run.method).
    #[arg(long)]
    method: Option<String>,
    /// Evaluation budget, 0 for unlimited (run.budget).
    #[arg(long)]
    budget: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut out = self.overrides.clone();
        if let Some(o) = &self.out {
            out.push(format!("run.out_dir={}", toml_string(o)));
        }
        if let Some(s) = &self.seeds {
            let list: Vec<String> = s.iter().map(u64::to_string).collect();
            out.push(format!("run.seeds=[{}]", list.join(",")));
        }
        if let Some(m) = &self.method {
            out.push(format!("run.method={}", toml_string(m)));
        }
        if let Some(b) = self.budget {
            out.push(format!("run.budget={b}"));
        }
        out
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let common = match &cli.command {
        Command::Enumerate(c)
        | Command::Train(c)
        | Command::Sample(c)
        | Command::Baseline(c)
        | Command::Report(c)
        | Command::Config(c) => c,
    };
    let cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides())?;
    let exp = Experiment::new(cfg)?;
    let outcome: CommandOutcome = match cli.command {
        Command::Enumerate(_) => exp.cmd_enumerate()?,
        Command::Train(_) => exp.cmd_train()?,
        Command::Sample(_) => exp.cmd_sample()?,
        Command::Baseline(_) => exp.cmd_baseline()?,
        Command::Report(_) => exp.cmd_report()?,
        Command::Config(_) => {
            println!("# config_hash={}", exp.hash());
            print!("{}", exp.config().to_toml());
            return Ok(());
        }
    };
    for f in &outcome.files {
        println!("{}", f.display());
    }
    eprintln!(
        "{} ({} simulator evaluations)",
        outcome.dir.display(),
        outcome.simulations
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let err = anyhow::Error::new(e).context("gfnadapt failed");
            eprintln!("error: {err:#}");
            ExitCode::from(code as u8)
        }
    }
}
