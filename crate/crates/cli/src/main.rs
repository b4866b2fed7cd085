use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedfisher::experiment::{parse_config_text, run, write_csv, write_csv_to, ConfigMap, ExperimentConfig, Task};
use fedfisher::Error;

/// One-shot federated learning experiments with Fisher-merged models.
#[derive(Parser)]
#[command(name = "fedfisher", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic two-layer ReLU regression, sweeping the hidden width.
    SyntheticWidth(RunArgs),
    /// Synthetic two-layer ReLU regression, sweeping local steps.
    SyntheticSteps(RunArgs),
    /// One communication round on Dirichlet-split image classification.
    OneShot(RunArgs),
    /// Several rounds of local training and merging.
    FewShot(RunArgs),
    /// Accuracy and exact bit counts over a grid of compression settings.
    CompressBench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds, e.g. `0,1,2` or `0..10`.
    #[arg(long)]
    seed_list: Option<String>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Further overrides as `--section.key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    rest: Vec<String>,
}

impl Command {
    fn split(self) -> (Task, RunArgs) {
        match self {
            Command::SyntheticWidth(a) => (Task::SyntheticWidth, a),
            Command::SyntheticSteps(a) => (Task::SyntheticSteps, a),
            Command::OneShot(a) => (Task::OneShot, a),
            Command::FewShot(a) => (Task::FewShot, a),
            Command::CompressBench(a) => (Task::CompressBench, a),
        }
    }
}

fn overrides(args: &RunArgs) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for s in &args.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut rest = args.rest.iter();
    while let Some(flag) = rest.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument `{flag}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = rest.next().ok_or_else(|| Error::Config(format!("`{flag}` needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if !key.contains('.') {
            return Err(Error::Config(format!("`--{key}`: overrides take the form --section.key")));
        }
        out.push((key, value));
    }
    if let Some(s) = &args.seed_list {
        out.push(("run.seeds".into(), s.clone()));
    }
    if let Some(p) = &args.out {
        out.push(("run.out".into(), p.display().to_string()));
    }
    Ok(out)
}

fn build_config(task: Task, args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut map = match &args.config {
        Some(path) => parse_config_text(&std::fs::read_to_string(path)?)?,
        None => ConfigMap::new(),
    };
    for (k, v) in overrides(args)? {
        map.insert(k, v);
    }
    ExperimentConfig::from_map(task, &map)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) => 3,
        Error::Config(_) | Error::Parse { .. } | Error::Infeasible(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let (task, args) = Cli::parse().command.split();
    let cfg = match build_config(task, &args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("fedfisher: {e}");
            return ExitCode::from(2);
        }
    };
    let rows = match run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("fedfisher: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let written = match &cfg.out {
        Some(path) => write_csv(path, &rows),
        None => write_csv_to(std::io::stdout().lock(), &rows),
    };
    if let Err(e) = written {
        eprintln!("fedfisher: {e}");
        return ExitCode::from(1);
    }
    let diverged = rows.iter().filter(|r| r.diverged).count();
    if diverged > 0 {
        eprintln!("fedfisher: {diverged} of {} rows diverged", rows.len());
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
