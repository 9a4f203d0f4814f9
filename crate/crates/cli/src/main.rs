use std::path::PathBuf;
use std::process::ExitCode;

use agentinfer_cli::commands::{self, sam_draft, sam_dump, sam_stats};
use agentinfer_cli::{keys, settings, verify, CliError, OUT_DIR_ENV};
use agentinfer_core::sam::DraftPolicy;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

/// Simulated agent-serving stack: scenario runs, acceptance checks and
/// suffix automaton inspection.
#[derive(Debug, Parser)]
#[command(name = "agentinfer", version)]
struct Cli {
    /// Seed for the run; defaults to `seeds.default` of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override as a dotted key path, e.g. `--set pool.N=4096`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Report directory; defaults to `output.dir` of the config.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario from a config file or bundled preset name.
    Run {
        /// Path to a TOML config, or one of: default, sched_compare,
        /// sam_async, compress, collab, composition, ote_sweep.
        config: String,
    },
    /// Run the acceptance checks and print a pass/fail table.
    Verify {
        /// Run only these criteria (1-10).
        #[arg(long = "only", value_name = "ID")]
        only: Vec<u8>,
    },
    /// Inspect suffix automata built from token files.
    #[command(subcommand)]
    Sam(SamCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    LatestOnly,
    LatestThenEarliest,
}

#[derive(Debug, Subcommand)]
enum SamCommand {
    /// Build an automaton and write its states as JSON.
    Build {
        tokens: PathBuf,
        /// Output file; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print corpus size, state and transition counts.
    Stats { tokens: PathBuf },
    /// Match a context against the automaton and print the draft.
    Draft {
        tokens: PathBuf,
        /// Context token ids, whitespace or comma separated.
        #[arg(long)]
        context: String,
        #[arg(short = 'k', long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        min_match: usize,
        #[arg(long, value_enum, default_value = "latest-then-earliest")]
        policy: PolicyArg,
    },
}

fn run_command(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config } => {
            let cfg = settings::resolve(&config, &cli.overrides)?;
            let seed = cli.seed.unwrap_or(cfg.seeds.default);
            let dir = cli.out_dir.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            let out = commands::run(&cfg, seed, &dir)?;
            print!("{}", out.summary);
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Verify { only } => {
            let ids: Vec<u8> = if only.is_empty() { verify::IDS.to_vec() } else { only };
            let mut failed = Vec::new();
            for id in ids {
                let c = verify::run(id);
                println!("{}", c.line());
                if !c.passed {
                    failed.push(id);
                }
            }
            if failed.is_empty() {
                println!("all criteria passed");
                Ok(())
            } else {
                Err(CliError::Contract(format!("criteria failed: {failed:?}")))
            }
        }
        Command::Sam(sub) => run_sam(sub),
    }
}

fn run_sam(sub: SamCommand) -> Result<(), CliError> {
    match sub {
        SamCommand::Build { tokens, out } => {
            let corpus = commands::read_tokens(&tokens)?;
            let sam = commands::build_automaton(&corpus)?;
            let dump = sam_dump(&sam);
            match out {
                Some(path) => {
                    std::fs::write(&path, dump).map_err(|e| CliError::io(path.display(), e))?;
                    println!("{} tokens, {} states -> {}", corpus.len(), sam.state_count(), path.display());
                }
                None => println!("{dump}"),
            }
        }
        SamCommand::Stats { tokens } => {
            let s = sam_stats(&commands::read_tokens(&tokens)?)?;
            println!("corpus_tokens   {}", s.corpus_tokens);
            println!("distinct_tokens {}", s.distinct_tokens);
            println!("states          {} (bound {})", s.states, s.state_bound);
            println!("transitions     {}", s.transitions);
            println!("build_seconds   {:.6}", s.build_seconds);
        }
        SamCommand::Draft {
            tokens,
            context,
            k,
            min_match,
            policy,
        } => {
            let sam = commands::build_automaton(&commands::read_tokens(&tokens)?)?;
            let ctx = commands::parse_tokens(&context).map_err(|m| CliError::config("--context", m))?;
            let policy = match policy {
                PolicyArg::LatestOnly => DraftPolicy::LatestOnly,
                PolicyArg::LatestThenEarliest => DraftPolicy::LatestThenEarliest,
            };
            let (trace, draft) = sam_draft(&sam, &ctx, k, min_match, policy);
            for m in trace {
                println!("{:>10} match_len {}", m.token, m.match_len);
            }
            let words: Vec<String> = draft.iter().map(u32::to_string).collect();
            println!("draft: {}", words.join(" "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let keys = keys::help_text();
    let matches = Cli::command().after_help(keys.clone()).after_long_help(keys).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run_command(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
