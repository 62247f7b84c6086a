//! `ioslab` — configuration-driven front end for the output-stability
//! laboratory.
//!
//! Exit codes: 0 = completed, all checks passing; 1 = completed with
//! violations found (a refuted estimate or failed certificate is a valid
//! scientific outcome); 2 = configuration error; 3 = runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ioslab::config::{parse_config, validate_config, RunConfig};
use ioslab::report::TaskOutcome;
use ioslab::tasks::{run_task, TaskError};

#[derive(Parser)]
#[command(name = "ioslab", version, about = "Output-stability laboratory")]
struct Cli {
    /// Worker threads for grid sweeps and batched searches
    /// (falls back to the IOSLAB_JOBS environment variable).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the task described by a config file.
    Run(RunArgs),
    /// Validate a config file without running anything; prints every
    /// problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// List the built-in systems.
    Registry,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the report and any CSV artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted-path overrides applied to the config document, e.g.
    /// `--set task.budget.max_sims=500`. Values parse as JSON when
    /// possible, as strings otherwise. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = cli
        .jobs
        .or_else(|| std::env::var("IOSLAB_JOBS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Run(args) => run(args),
        Command::Validate { config, overrides } => validate(config, overrides),
        Command::Registry => {
            for sys in ioslab::system::builtin_registry() {
                println!(
                    "{:24} n={} m={} p={} inputs={:?}",
                    sys.name(),
                    sys.state_dim(),
                    sys.input_dim(),
                    sys.output_dim(),
                    sys.input_domain(),
                );
            }
            ExitCode::SUCCESS
        }
    }
}

fn load_config(
    path: &PathBuf,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| vec![format!("config does not parse: {e}")])?;
    for kv in overrides {
        apply_override(&mut doc, kv).map_err(|e| vec![e])?;
    }
    if let Some(seed) = seed {
        doc["seed"] = serde_json::json!(seed);
    }
    let text = serde_json::to_string(&doc).expect("document serializes");
    parse_config(&text)
}

fn apply_override(doc: &mut serde_json::Value, kv: &str) -> Result<(), String> {
    let (path, raw) = kv
        .split_once('=')
        .ok_or_else(|| format!("override `{kv}` is not KEY=VALUE"))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if last {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                _ => return Err(format!("override path `{path}` does not address an object")),
            }
        }
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .entry(part.to_string())
                .or_insert_with(|| serde_json::json!({})),
            _ => return Err(format!("override path `{path}` does not address an object")),
        };
    }
    Ok(())
}

fn run(args: RunArgs) -> ExitCode {
    let cfg = match load_config(&args.config, &args.overrides, args.seed) {
        Ok(c) => c,
        Err(problems) => {
            for p in problems {
                eprintln!("error: {p}");
            }
            return ExitCode::from(2);
        }
    };
    match run_task(&cfg, Some(&args.out)) {
        Ok(report) => {
            println!("{}", report.to_json_pretty());
            match report.outcome {
                TaskOutcome::Passed => ExitCode::SUCCESS,
                TaskOutcome::ViolationsFound => ExitCode::from(1),
            }
        }
        Err(TaskError::Config(problems)) => {
            for p in problems {
                eprintln!("error: {p}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn validate(config: PathBuf, overrides: Vec<String>) -> ExitCode {
    let cfg = match load_config(&config, &overrides, None) {
        Ok(c) => c,
        Err(problems) => {
            for p in problems {
                eprintln!("error: {p}");
            }
            return ExitCode::from(2);
        }
    };
    let problems = validate_config(&cfg);
    if problems.is_empty() {
        println!("ok: {} task on `{}`", cfg.task.kind(), system_label(&cfg));
        ExitCode::SUCCESS
    } else {
        for p in &problems {
            eprintln!("problem: {p}");
        }
        eprintln!("{} problem(s) found", problems.len());
        ExitCode::from(2)
    }
}

fn system_label(cfg: &RunConfig) -> String {
    match &cfg.system {
        ioslab::config::SystemConfig::Registry(n) => n.clone(),
        ioslab::config::SystemConfig::Inline(i) => i.name.clone(),
    }
}
