use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_lab::cli::{self, AnalyzeArgs, Overrides, RunConfig};
use moe_lab::Result;

#[derive(Parser)]
#[command(name = "moe-lab", version, about = "Train and analyze small mixture-of-experts language models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// indep, path, mono, lowrank, xmoe or rand.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut run = RunConfig::from_file(&self.config)?;
        run.apply(&Overrides {
            seed: self.seed,
            strategy: self.strategy.clone(),
            block_size: self.block_size,
            top_k: self.top_k,
            alpha: self.alpha,
            steps: self.steps,
            out: self.out.clone(),
        })?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Record per-token routing decisions to a JSONL trace.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text file, byte tokenized.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long, default_value_t = 16)]
        rows: usize,
    },
    /// Compute a path statistic from a trace.
    Analyze {
        /// entropy, markov, mi, coverage, align, consistency, engagement,
        /// specialize, robustness, categories or report.
        metric: String,
        #[arg(long)]
        trace: PathBuf,
        /// Output file (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Window sizes, e.g. `2..8`.
        #[arg(long)]
        window: Option<String>,
        /// Run-length thresholds, e.g. `1..4`.
        #[arg(long)]
        threshold: Option<String>,
        /// Coverage cut-offs, e.g. `1,10,100`.
        #[arg(long)]
        k: Option<String>,
        #[arg(long, default_value_t = 10)]
        paths: usize,
        #[arg(long, default_value_t = 20)]
        tokens: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation text for robustness (default: the trace tokens).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-layer probability of permuting dispatch.
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Continue training with routing confined to the top-K paths.
    Restrict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: usize,
        /// Text used to find the paths (default: the held-out split).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable kernel.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Train { run, resume } => {
            let s = cli::cmd_train(&run.load()?, resume.as_deref())?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Cmd::Restrict { run, checkpoint, k, data } => {
            let s = cli::cmd_restrict(&run.load()?, &checkpoint, k, data.as_deref())?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Cmd::Trace { checkpoint, data, out, max_tokens, rows } => {
            let mut tokens = cli::read_tokens(&data)?;
            if let Some(n) = max_tokens {
                tokens.truncate(n);
            }
            let s = cli::cmd_trace(&checkpoint, &tokens, rows, &out)?;
            println!("tokens={} unique_paths={} entropy_bits={:.4}", s.tokens, s.unique_paths, s.entropy_bits);
        }
        Cmd::Analyze { metric, trace, out, window, threshold, k, paths, tokens, checkpoint, data, p, seeds } => {
            let list = |s: Option<String>| s.map(|s| cli::parse_list(&s)).transpose();
            let args = AnalyzeArgs { windows: list(window)?, thresholds: list(threshold)?, ks: list(k)?, paths, tokens, checkpoint, data, p, seeds, ..AnalyzeArgs::default() };
            let (tr, hash) = cli::load_trace(&trace)?;
            let text = cli::analyze(&metric, &tr, &args)?.render(&metric, &hash)?;
            cli::emit(&text, out.as_deref())?;
        }
        Cmd::GradCheck { eps, out } => {
            let (text, ok) = cli::cmd_grad_check(eps)?;
            cli::emit(&text, out.as_deref())?;
            if !ok {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}

