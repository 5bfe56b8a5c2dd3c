//! `sharpen`: run decoding experiments on tabular models, self-check the
//! numerics, or serve a model over HTTP for remote decoding.

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};

use sharpen_cli::report::write_reports;
use sharpen_cli::run::{ExperimentConfig, Method, load_model, run_experiment};
use sharpen_cli::verify::{load_fixtures, print_table, verify_suite};
use sharpen_remote::serve_mock;

#[derive(Parser)]
#[command(name = "sharpen", version, about = "Sharpened-marginal decoding experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run repeated decode trials and report the empirical answer law.
    Run(RunArgs),
    /// Check the numerical identities and pinned fixture values.
    Verify(VerifyArgs),
    /// Serve a tabular model over HTTP for remote decoding.
    ServeMock(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Builtin model name (t1, t2, t3) or a model JSON path.
    #[arg(long, env = "SHARPEN_MODEL")]
    model: Option<String>,
    /// Decode through this server instead of in process.
    #[arg(long, env = "SHARPEN_SERVER")]
    server: Option<String>,
    #[arg(long, env = "SHARPEN_METHOD", value_enum, default_value = "marginal")]
    method: Method,
    /// Sharpening strength (traces per group); comma list sweeps.
    #[arg(long = "K", env = "SHARPEN_K", value_delimiter = ',', default_value = "2")]
    k: Vec<usize>,
    /// Trace groups mixed at each step; comma list sweeps.
    #[arg(long = "S", env = "SHARPEN_S", value_delimiter = ',', default_value = "1")]
    s: Vec<usize>,
    /// Sweep every K*S factorization of this trace budget instead of --K/--S.
    #[arg(long, env = "SHARPEN_KS_BUDGET")]
    ks_budget: Option<usize>,
    /// Total length budget per completion.
    #[arg(long = "L", env = "SHARPEN_L", default_value_t = 32)]
    l: usize,
    /// Completions per majority vote.
    #[arg(long = "k", env = "SHARPEN_VOTES", default_value_t = 16)]
    votes: usize,
    /// Particles for sis decoding.
    #[arg(long = "P", env = "SHARPEN_P", default_value_t = 8)]
    particles: usize,
    /// Sharpening exponent for joint-exact (and the gap report column).
    #[arg(long, env = "SHARPEN_ALPHA")]
    alpha: Option<f64>,
    #[arg(long, env = "SHARPEN_TRIALS", default_value_t = 200)]
    trials: usize,
    #[arg(long, env = "SHARPEN_SEED", default_value_t = 0)]
    seed: u64,
    /// Ask the server for only the top-L entries per context (0 = all).
    #[arg(long, env = "SHARPEN_TOP_L", default_value_t = 0)]
    top_l: usize,
    /// Prompt ids to run; default is every prompt of the model.
    #[arg(long = "prompt", env = "SHARPEN_PROMPT", value_delimiter = ',')]
    prompts: Vec<String>,
    /// Write run_NNN.json files and a summary.csv here instead of stdout.
    #[arg(long, env = "SHARPEN_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Substitute model JSON for the t1 fixture.
    #[arg(long)]
    t1: Option<PathBuf>,
    /// Substitute model JSON for the t2 fixture.
    #[arg(long)]
    t2: Option<PathBuf>,
    /// Substitute model JSON for the t3 fixture.
    #[arg(long)]
    t3: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Builtin model name (t1, t2, t3) or a model JSON path.
    #[arg(long, default_value = "t1")]
    model: String,
    #[arg(long, default_value = "127.0.0.1:8484")]
    bind: String,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Run(a) => {
            let cfg = ExperimentConfig {
                model: a.model,
                server: a.server,
                method: a.method,
                k_values: a.k,
                s_values: a.s,
                ks_budget: a.ks_budget,
                l: a.l,
                votes: a.votes,
                particles: a.particles,
                alpha: a.alpha,
                trials: a.trials,
                seed: a.seed,
                top_l: a.top_l,
                prompts: a.prompts,
            };
            let reports = run_experiment(&cfg)?;
            match a.out {
                Some(dir) => {
                    write_reports(&reports, &dir)?;
                    println!("wrote {} reports to {}", reports.len(), dir.display());
                }
                None => println!("{}", serde_json::to_string_pretty(&reports)?),
            }
        }
        Cmd::Verify(a) => {
            let fx = load_fixtures(a.t1.as_deref(), a.t2.as_deref(), a.t3.as_deref())?;
            if !print_table(&verify_suite(&fx)) {
                std::process::exit(1);
            }
        }
        Cmd::ServeMock(a) => {
            let model = load_model(&a.model)?;
            let addr: SocketAddr =
                a.bind.parse().with_context(|| format!("parsing bind address {:?}", a.bind))?;
            let handle = serve_mock(model, addr).context("starting server")?;
            println!("serving on {}", handle.url());
            loop {
                std::thread::park();
            }
        }
    }
    Ok(())
}
