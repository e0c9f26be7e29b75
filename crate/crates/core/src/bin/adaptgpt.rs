use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adaptgpt::battery::run_battery;
use adaptgpt::config::RunConfig;
use adaptgpt::gradcheck::DEFAULT_TOLERANCE;
use adaptgpt::pipeline;
use adaptgpt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "adaptgpt",
    version,
    about = "Train and inspect small GPT models with adapter feed-forward layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`, applied after the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task model and write config, metrics and checkpoint to out_dir.
    Train(ConfigArgs),
    /// Score a saved run on its dev split or on --data.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sample a continuation from a saved run.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Sampling overrides such as `--temperature 0 --max_new_tokens 64`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference gradient check of every layer type.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter counts of every feed-forward variant at the configured sizes.
    ParamCount(ConfigArgs),
}

/// Splits `--key value` and `--key=value` tokens into pairs.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| Error::InvalidArgument(format!("expected `--key`, found `{tok}`")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::InvalidArgument(format!("`--{key}` needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// `--config` may also appear among the trailing overrides.
fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let (files, overrides): (Vec<_>, Vec<_>) = parse_overrides(&args.overrides)?
        .into_iter()
        .partition(|(k, _)| k == "config");
    let mut file = args.config.clone();
    for (_, path) in files {
        if file.replace(PathBuf::from(path)).is_some() {
            return Err(Error::InvalidArgument("`--config` given more than once".into()));
        }
    }
    RunConfig::load(file.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let s = pipeline::train(&cfg)?;
            let r = &s.report;
            println!(
                "task={} ffn_kind={} steps={} epochs={} trainable={} total={}",
                cfg.task, cfg.model.ffn_kind, r.steps, r.epochs, s.trainable_params, s.total_params
            );
            if let Some(n) = s.initialised_from {
                println!(
                    "initialised {n} parameters from {}",
                    cfg.init_from.as_ref().expect("set").display()
                );
            }
            if let (Some(best), Some(epoch)) = (r.best_dev, r.best_epoch) {
                println!("best dev {}={best:.4} at epoch {epoch}", cfg.task.metric_name());
            }
            if r.stopped_early {
                println!("stopped early");
            }
            println!("run directory: {}", s.out_dir.display());
            Ok(true)
        }
        Command::Evaluate { checkpoint, data } => {
            let (task, value) = pipeline::evaluate(&checkpoint, data.as_deref())?;
            println!("{task} {} {value:.4}", task.metric_name());
            Ok(true)
        }
        Command::Generate {
            checkpoint,
            prompt,
            overrides,
        } => {
            let text = pipeline::generate(&checkpoint, &prompt, &parse_overrides(&overrides)?)?;
            println!("{prompt}{text}");
            Ok(true)
        }
        Command::Gradcheck { seed } => {
            let mut ok = true;
            for r in run_battery(seed)? {
                ok &= r.passed();
                println!(
                    "{:<24} max_rel_error={:.3e}  worst={:<20} {}",
                    r.layer,
                    r.max_rel_error,
                    r.worst_leaf,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "tolerance {DEFAULT_TOLERANCE:e}: {}",
                if ok { "all passed" } else { "failures" }
            );
            Ok(ok)
        }
        Command::ParamCount(args) => {
            let cfg = load_config(&args)?;
            println!(
                "{:<11} {:>12} {:>12} {:>10}  closed-form",
                "ffn_kind", "total", "trainable", "fraction"
            );
            for row in pipeline::param_table(&cfg)? {
                let agrees = row.analytic.total == row.total && row.analytic.trainable == row.trainable;
                println!(
                    "{:<11} {:>12} {:>12} {:>9.2}%  {}",
                    row.ffn_kind.as_str(),
                    row.total,
                    row.trainable,
                    100.0 * row.trainable as f64 / row.total as f64,
                    if agrees { "match" } else { "MISMATCH" }
                );
            }
            if let Some(c) = cfg.task.num_classes() {
                println!(
                    "{} head adds {} trainable parameters ({c} classes)",
                    cfg.task,
                    c * cfg.model.d_model + c
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
