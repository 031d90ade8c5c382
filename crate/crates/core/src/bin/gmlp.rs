use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gmlp::commands::{cmd_analyze, cmd_complexity, cmd_eval, cmd_synth, cmd_train, DataSource};
use gmlp::config::{RunConfig, OUTPUT_DIR_ENV};
use gmlp::data::{LabelColumn, SynthBayesNet};
use gmlp::GmlpError;

#[derive(Parser)]
#[command(name = "gmlp", version, about = "Train and inspect group-connected MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// CSV dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Label column: `last`, a 0-based index, or a header name.
    #[arg(long, default_value = "last")]
    label_column: String,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
}

impl DataArgs {
    fn source(&self) -> Result<Option<DataSource>, GmlpError> {
        let Some(path) = &self.data else { return Ok(None) };
        Ok(Some(DataSource {
            path: path.clone(),
            label_column: self.label_column.parse::<LabelColumn>()?,
            has_header: !self.no_header,
        }))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set epochs=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (overrides the config and the environment).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a CSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Also report accuracy with discretized routing.
        #[arg(long)]
        hard_routing: bool,
        /// Worker threads for prediction.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Write the JSON report here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample the synthetic Bayesian-network dataset and its exact oracle.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 6400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// P(root = 1), shared by all six roots.
        #[arg(long)]
        root_prob: Option<f64>,
        #[arg(long)]
        xor_fidelity: Option<f64>,
        /// P(label = 1) for 0..=3 active middle nodes, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        target_rule: Option<Vec<f64>>,
    },
    /// Export routing heat map, group graph and correlation histograms.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Defaults to an `analysis` directory next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Operation and parameter counts of an architecture.
    Complexity {
        #[arg(long)]
        arch: String,
        /// Input feature count (defaults to k·m).
        #[arg(long)]
        d: Option<usize>,
    },
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), GmlpError> {
    let text = serde_json::to_string_pretty(value)?;
    // A closed pipe (e.g. `| head`) is not a failure of the command.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), GmlpError> {
    match cli.command {
        Command::Train { config, overrides, out } => {
            let mut cfg = RunConfig::load(&config)?;
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| GmlpError::Config(format!("override `{o}` is not KEY=VALUE")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            cfg.validate()?;
            print_json(&cmd_train(&cfg)?)
        }
        Command::Eval {
            checkpoint,
            data,
            hard_routing,
            threads,
            out,
        } => {
            let source = data
                .source()?
                .ok_or_else(|| GmlpError::Config("eval needs --data".into()))?;
            print_json(&cmd_eval(&checkpoint, &source, hard_routing, threads.max(1), out.as_deref())?)
        }
        Command::Synth {
            out,
            n,
            seed,
            root_prob,
            xor_fidelity,
            target_rule,
        } => {
            let mut net = SynthBayesNet::default();
            if let Some(p) = root_prob {
                net.root_prob = [p; 6];
            }
            if let Some(f) = xor_fidelity {
                net.xor_fidelity = f;
            }
            if let Some(rule) = target_rule {
                net.target_rule.copy_from_slice(&rule);
            }
            net.validate()?;
            let out = out.unwrap_or_else(|| default_output_dir().join("synth"));
            print_json(&cmd_synth(&out, n, seed, &net)?)
        }
        Command::Analyze { checkpoint, data, out } => {
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map_or_else(|| PathBuf::from("analysis"), |p| p.join("analysis"))
            });
            let source = data.source()?;
            let report = cmd_analyze(&checkpoint, source.as_ref(), &out)?;
            for notice in &report.notices {
                eprintln!("note: {notice}");
            }
            print_json(&report)
        }
        Command::Complexity { arch, d } => print_json(&cmd_complexity(&arch, d)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
