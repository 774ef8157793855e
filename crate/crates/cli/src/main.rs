use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uhlm_core::backend::external::{serve_stub, StubOptions};
use uhlm_core::Vocabulary;
use uhlm_cli::commands;
use uhlm_cli::summary::write_rows;
use uhlm_cli::{CliError, Overrides, Result, RunConfigFile};

#[derive(Parser)]
#[command(name = "uhlm", version, about = "Uncertainty-aware hybrid language model simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run HLM with oracle mode and fit the skip thresholds.
    Calibrate(#[command(flatten)] Overrides),
    /// One run per seed; writes traces and a summary CSV.
    Run(#[command(flatten)] Overrides),
    /// Run the cross product of the sweep axes.
    Sweep {
        #[command(flatten)]
        flags: Overrides,
        /// Parallel runs; 0 uses every logical core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Train the configured n-gram pair and save it.
    TrainNgram(#[command(flatten)] Overrides),
    /// Protocol stub returning uniform logits, for testing external backends.
    #[command(hide = true)]
    StubBackend {
        #[arg(long, default_value_t = 16)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0)]
        eos_id: u32,
        /// Stop answering after this many replies.
        #[arg(long)]
        hang_after: Option<usize>,
        #[arg(long)]
        wrong_length: bool,
        /// Serve one TCP connection on this address instead of stdio.
        #[arg(long)]
        listen: Option<String>,
    },
}

fn stub(vocab: Vocabulary, opts: StubOptions, listen: Option<String>) -> Result<()> {
    let io = |e| CliError::io("stub", e);
    match listen {
        Some(addr) => {
            let listener = TcpListener::bind(&addr).map_err(io)?;
            eprintln!("listening on {}", listener.local_addr().map_err(io)?);
            let (stream, _) = listener.accept().map_err(io)?;
            let reader = BufReader::new(stream.try_clone().map_err(io)?);
            serve_stub(reader, stream, vocab, opts).map_err(io)
        }
        None => serve_stub(std::io::stdin().lock(), std::io::stdout().lock(), vocab, opts).map_err(io),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Calibrate(flags) => {
            let cfg = RunConfigFile::resolve(&flags)?;
            let out = commands::calibrate(&cfg)?;
            let m = &out.model;
            println!("a = {:.6}  b = {:.6}  delta = {:.6}", m.a, m.b, m.delta);
            println!("u_th risk-averse = {:.6}", m.u_th_averse);
            println!("u_th risk-prone  = {:.6}", m.u_th_prone);
            println!("expected risk = {:.6e}  bound = {:.6e}", m.expected_risk, m.risk_upper_bound);
            println!("wrote {}", out.path.display());
        }
        Command::Run(flags) => {
            let cfg = RunConfigFile::resolve(&flags)?;
            let report = commands::run(&cfg)?;
            write_rows(std::io::stdout().lock(), &report.rows)?;
            eprintln!("wrote {}", report.summary_path.display());
        }
        Command::Sweep { flags, jobs } => {
            let cfg = RunConfigFile::resolve(&flags)?;
            let (rows, path) = commands::sweep(&cfg, jobs)?;
            let failed = rows.iter().filter(|r| !r.ok()).count();
            eprintln!("{} cells ({failed} failed), wrote {}", rows.len(), path.display());
        }
        Command::TrainNgram(flags) => {
            let cfg = RunConfigFile::resolve(&flags)?;
            let path = commands::train_ngram(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::StubBackend { vocab_size, eos_id, hang_after, wrong_length, listen } => {
            let vocab = Vocabulary::new(vocab_size, eos_id)?;
            stub(vocab, StubOptions { hang_after, wrong_length }, listen)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UHLM_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let _ = std::io::stderr().flush();
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
