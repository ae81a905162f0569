use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use siamts::gradcheck::GradcheckOptions;
use siamts_cli::{cmd_gradcheck, cmd_run, cmd_sweep, cmd_synth, init_threads, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "siamts", version, about = "Self-supervised user identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    Synth(Common),
    /// Run every method at every label fraction and write the kappa report.
    Run(Common),
    /// Run the config's [sweep] table.
    Sweep(Common),
    /// Finite-difference gradient check of every op.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_parser = ["musicid", "mmi", "synth"])]
    profile: Option<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let o = Overrides {
            profile: self.profile.clone(),
            out: self.out.clone(),
            seed: self.seed,
            runs: self.runs,
        };
        RunConfig::load(self.config.as_deref(), &o)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Synth(c) => {
            let path = cmd_synth(&c.load()?)?;
            println!("{}", path.display());
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            let report = cmd_run(&cfg)?;
            for a in &report.aggregates {
                let v = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{:<11} {:>5}  kappa {} +- {}  ({} runs, {} failed)",
                    a.method.name(),
                    a.fraction,
                    v(a.mean_kappa),
                    v(a.std),
                    a.n,
                    a.failed
                );
            }
            println!("report written to {}", cfg.out.display());
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let table = cmd_sweep(&cfg)?;
            for cell in &table.cells {
                println!(
                    "{:<28} {}  {:.4} +- {:.4}",
                    cell.value,
                    cell.setting.name(),
                    cell.mean,
                    cell.std
                );
            }
        }
        Command::Gradcheck { out, seed } => {
            cmd_gradcheck(seed, &GradcheckOptions::default(), out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("siamts: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
