use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avdrec::eval::Task;
use avdrec::pipeline::{self, RunConfig, Variant};
use avdrec::Result;

/// Content-aware weighted matrix factorization for implicit feedback.
#[derive(Parser)]
#[command(name = "avdrec", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, binarize and split the playcounts.
    Ingest,
    /// Fit and score the content factors.
    Features,
    /// Train the configured model variants.
    Train,
    /// Score the test tasks and write the summary table.
    Evaluate,
    /// Run every stage in order.
    RunAll,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    playcounts: Option<PathBuf>,
    #[arg(long, global = true)]
    features: Option<PathBuf>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true)]
    lambda_w: Option<f64>,
    #[arg(long, global = true)]
    lambda_h: Option<f64>,
    #[arg(long, global = true)]
    base_confidence: Option<f64>,
    /// Model variant to train/evaluate (repeatable): content_free, content_aware.
    #[arg(long = "variant", global = true)]
    variants: Vec<String>,
    /// Evaluation task (repeatable): in_matrix, out_of_matrix, validation.
    #[arg(long = "task", global = true)]
    tasks: Vec<String>,
    #[arg(long, global = true)]
    no_baseline: bool,
    /// Accept artifacts produced under a different configuration.
    #[arg(long, global = true)]
    allow_hash_mismatch: bool,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(p) = &o.output_dir {
        cfg.paths.output_dir = p.clone();
    }
    if let Some(p) = &o.playcounts {
        cfg.paths.playcounts = Some(p.clone());
    }
    if let Some(p) = &o.features {
        cfg.paths.features = Some(p.clone());
    }
    let hp = &mut cfg.hyperparams;
    hp.rank = o.rank.or(hp.rank);
    hp.n_iters = o.iters.or(hp.n_iters);
    hp.lambda_w = o.lambda_w.or(hp.lambda_w);
    hp.lambda_h = o.lambda_h.or(hp.lambda_h);
    hp.base_confidence = o.base_confidence.or(hp.base_confidence);
    if !o.variants.is_empty() {
        cfg.train.variants = o
            .variants
            .iter()
            .map(|v| Variant::parse(v))
            .collect::<Result<_>>()?;
    }
    if !o.tasks.is_empty() {
        cfg.eval.tasks = o
            .tasks
            .iter()
            .map(|t| t.parse::<Task>())
            .collect::<Result<_>>()?;
    }
    if o.no_baseline {
        cfg.eval.pure_content_baseline = false;
    }
    if o.allow_hash_mismatch {
        cfg.eval.allow_hash_mismatch = true;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Ingest => {
            let s = pipeline::cmd_ingest(&cfg)?;
            println!(
                "{} users, {} songs ({} held out), {} playcounts, {} positives",
                s.n_users, s.n_items, s.n_out_of_matrix, s.n_playcounts, s.n_positives
            );
        }
        Command::Features => {
            let a = pipeline::cmd_features(&cfg)?;
            println!(
                "{} factors from {} features, rotation converged: {}",
                a.result.n_factors(),
                a.result.n_features(),
                a.result.converged
            );
        }
        Command::Train => {
            for (v, m) in pipeline::cmd_train(&cfg)? {
                let last = m.objective_trace.last().copied().unwrap_or(f64::NAN);
                println!("{}: final objective {last:.6}", v.as_str());
            }
        }
        Command::Evaluate => print!("{}", pipeline::cmd_evaluate(&cfg)?.render()),
        Command::RunAll => print!("{}", pipeline::cmd_run_all(&cfg)?.render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
