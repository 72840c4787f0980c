use clap::{Parser, Subcommand};
use okaf::pipeline::{self, RunConfig, StageSel};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "okaf", version, about = "Unified understanding/generation model on a synthetic corpus")]
struct Cli {
    /// Key-value config file; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Run directory holding data, checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the training and test splits.
    GenData,
    /// Filter and score the training split.
    Qc,
    /// Run one curriculum stage or all of them.
    Train {
        #[arg(long, default_value = "all")]
        stage: StageSel,
    },
    /// Generate one image from a text prompt with the latest checkpoint.
    Sample {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Output image; defaults to <out>/samples/<seed>.pgm
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Evaluate the latest checkpoint on a held-out split.
    Eval {
        #[arg(long, default_value = pipeline::TEST_SPLIT)]
        split: String,
    },
}

fn run(cli: &Cli) -> okaf::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p, cli.seed)?,
        None => RunConfig::new(cli.seed)?,
    };
    let out: &Path = &cli.out;
    match &cli.cmd {
        Cmd::GenData => {
            let (train, test) = pipeline::gen_data(&cfg, out)?;
            println!("wrote {train} training and {test} test records under {}", out.join("data").display());
        }
        Cmd::Qc => {
            let s = pipeline::run_qc(&cfg, out)?;
            println!(
                "qc: {} in, {} rejected by the filter, {} scored, {} kept",
                s.input, s.rejected, s.scored, s.kept
            );
        }
        Cmd::Train { stage } => {
            for p in pipeline::train(&cfg, out, *stage)? {
                println!("{}", p.display());
            }
        }
        Cmd::Sample { prompt, steps, image } => {
            let p = pipeline::sample(out, prompt, *steps, cli.seed, image.as_deref())?;
            println!("{}", p.display());
        }
        Cmd::Eval { split } => {
            let r = pipeline::eval(&cfg, out, split)?;
            print!("{}", r.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            match e {
                okaf::Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
