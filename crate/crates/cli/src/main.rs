use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modeprompt::config::{parse_context, parse_gate_mode};
use modeprompt::{commands, Result, RunConfig};
use modeprompt_core::align::{ContextMode, GateMode};

#[derive(Parser)]
#[command(name = "modeprompt", version, about = "Mode-approximation adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides run.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides run.seed and MODEPROMPT_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Use the plain fusion residual instead of the gated query.
    #[arg(long)]
    no_gated_query: bool,
    #[arg(long, value_parser = parse_context)]
    context: Option<ContextMode>,
    #[arg(long, value_parser = parse_gate_mode)]
    gate_mode: Option<GateMode>,
}

impl RunArgs {
    /// File, then environment, then flags; validated last.
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        run.apply_env()?;
        for assignment in &self.set {
            run.set_override(assignment)?;
        }
        if let Some(seed) = self.seed {
            run.seed = seed;
        }
        if let Some(out) = &self.out {
            run.out = out.clone();
        }
        if self.no_gated_query {
            run.model.gated_query = false;
        }
        if let Some(c) = self.context {
            run.model.context = c;
        }
        if let Some(g) = self.gate_mode {
            run.model.gate_mode = g;
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a commented default config.
    InitConfig { path: PathBuf },
    /// Train the adapter; writes metrics.csv and model.ckpt.
    Train(RunArgs),
    /// Compare analytic and finite-difference gradients on random models.
    Gradcheck(RunArgs),
    /// Trainable-parameter counts for each adapter family.
    AuditParams {
        #[arg(long, default_value_t = 12)]
        layers: u64,
        #[arg(long, default_value_t = 768)]
        width: u64,
        #[arg(long, default_value_t = 64)]
        rank: u64,
        /// Also count the parameters of this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check the gradient-descent rate bound on random quadratics.
    Convergence {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        problems: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Held-out retrieval recall of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { path } => {
            commands::init_config(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Train(args) => {
            let run = args.resolve()?;
            let outcome = commands::train(&run)?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "step {} loss {:.6} recall@1 {:.3}",
                    last.step, last.loss_total, last.recall_at_1
                );
            }
            println!("wrote {}", outcome.checkpoint.display());
        }
        Command::Gradcheck(args) => {
            let run = args.resolve()?;
            let rows = commands::gradcheck(&run)?;
            let checked: usize = rows.iter().map(|r| r.checked).sum();
            println!("gradcheck passed: {checked} entries over {} configs", run.gradcheck.configs);
        }
        Command::AuditParams { layers, width, rank, checkpoint, out } => {
            for r in commands::audit_params(layers, width, rank, checkpoint.as_deref(), &out)? {
                let allocated = r.allocated_count.map(|a| format!(" allocated {a}")).unwrap_or_default();
                println!("{:<10} {:<10} {}{allocated}", r.method, r.source, r.formula_count);
                if let Some(flag) = r.flag {
                    println!("  note: {flag}");
                }
            }
        }
        Command::Convergence { run, problems, steps } => {
            let mut cfg = run.resolve()?;
            if let Some(p) = problems {
                cfg.convergence.problems = p;
            }
            if let Some(s) = steps {
                cfg.convergence.steps = s;
            }
            let report = commands::convergence(&cfg.convergence, cfg.seed, &cfg.out)?;
            println!("rate bound held on {} steps", report.rows.len());
        }
        Command::Eval { checkpoint, seed, out } => {
            let seed = match seed {
                Some(s) => Some(s),
                None => modeprompt::config::env_seed()?,
            };
            let r = commands::eval(&checkpoint, seed, &out)?;
            println!("recall@1 {:.4} recall@5 {:.4} over {} pairs", r.recall_at_1, r.recall_at_5, r.pairs);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
