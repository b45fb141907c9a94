use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use commentnepa_cli::api::{serve, AppState};
use commentnepa_cli::commands::{self, DemoArgs, RunArgs};
use commentnepa_cli::setup::{self, BackendKind, Environment};
use commentnepa_cli::CliError;

#[derive(Parser)]
#[command(name = "commentnepa", version, about = "Audited LM pipeline for public comment letters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StoreArgs {
    /// SQLite store file.
    #[arg(long, env = setup::ENV_STORE, default_value = setup::DEFAULT_STORE)]
    store: PathBuf,
    #[arg(long, value_enum, env = setup::ENV_BACKEND, default_value = "scripted")]
    backend: BackendKind,
    /// TOML prompt pools replacing the built-in scripted ones.
    #[arg(long, env = setup::ENV_SCRIPTED_PROFILE)]
    scripted_profile: Option<PathBuf>,
}

impl StoreArgs {
    fn env(&self) -> Environment {
        Environment {
            store: self.store.clone(),
            backend: self.backend,
            scripted_profile: self.scripted_profile.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Process a corpus of letters in batches. Re-running resumes.
    Run {
        /// Letters as JSON lines: {"letter_id", "text"}.
        #[arg(long)]
        corpus: PathBuf,
        /// Binning guidance (TOML, or JSON by extension).
        #[arg(long)]
        guidance: PathBuf,
        /// Project description text.
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Run configuration (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for batch reports and the exported system output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        store: StoreArgs,
    },
    /// Prompt-selection demo on the rare-letters counting task.
    DemoBandit {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "demo-out")]
        out: PathBuf,
        /// Inverse temperature reached at the end of the ramp.
        #[arg(long, default_value_t = 1.0)]
        beta_end: f64,
        #[arg(long, default_value_t = 100)]
        ramp: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
        error_rates: Vec<f64>,
    },
    /// Score a system output against reviewer annotations.
    Eval {
        #[arg(long)]
        system_output: PathBuf,
        /// Annotations as JSON lines: {"letter_id", "start", "end", "bin_name"}.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "eval-out")]
        out: PathBuf,
        /// Letter-length bucket edges in characters.
        #[arg(long, value_delimiter = ',')]
        length_edges: Option<Vec<usize>>,
    },
    /// Write a run's output in the evaluator's input format.
    Export {
        /// Defaults to the most recent run.
        #[arg(long)]
        run: Option<String>,
        #[arg(long, default_value = "system_output.json")]
        out: PathBuf,
        #[command(flatten)]
        store: StoreArgs,
    },
    /// Write a synthetic annotated corpus with guidance and context.
    Fixtures {
        #[arg(long, default_value_t = 10)]
        letters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
    /// Serve the review API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[command(flatten)]
        store: StoreArgs,
    },
    /// Print the ancestry of an invocation.
    Trace {
        #[arg(long)]
        invocation: String,
        /// Do not clip long prompts and payloads.
        #[arg(long)]
        full: bool,
        #[command(flatten)]
        store: StoreArgs,
    },
}

fn dispatch(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::Run { corpus, guidance, context, batch_size, config, out, store } => commands::run(
            &store.env(),
            &RunArgs { corpus, guidance, context, batch_size, config, out },
        ),
        Command::DemoBandit { trials, seed, out, beta_end, ramp, error_rates } => {
            commands::demo_bandit(&DemoArgs { trials, seed, out, beta_end, ramp, error_rates })
        }
        Command::Eval { system_output, truth, out, length_edges } => {
            commands::eval(&system_output, &truth, &out, length_edges.as_deref())
        }
        Command::Export { run, out, store } => commands::export(&store.env(), run.as_deref(), &out),
        Command::Fixtures { letters, seed, out } => commands::fixtures(letters, seed, &out),
        Command::Trace { invocation, full, store } => commands::trace(&store.env(), &invocation, full),
        Command::Serve { port, host, store } => {
            let pipeline = Arc::new(store.env().pipeline()?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(AppState::new(pipeline), SocketAddr::new(host, port)))?;
            Ok(String::new())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
