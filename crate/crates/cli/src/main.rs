use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hierfed::experiment::{
    cmd_ablate, cmd_compare, cmd_run, preset_toml, write_csv, AblationAxis, ConfigSource, ExperimentPlan, Method,
    PRESETS,
};

#[derive(Parser)]
#[command(name = "hierfed", version, about = "Hierarchical federated language-model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Source {
    /// Built-in preset name.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Path to an experiment TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hierarchy rounds; baselines get the matching step budget.
    #[arg(long)]
    rounds: Option<usize>,
    /// `dotted.key=value` applied to the config before it is parsed.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl Source {
    fn plan(&self, method: Method, seed: Option<u64>) -> Result<ExperimentPlan> {
        let source = match (&self.preset, &self.config) {
            (Some(p), None) => ConfigSource::Preset(p.clone()),
            (None, Some(c)) => ConfigSource::Path(c.clone()),
            (None, None) => bail!("one of --preset or --config is required"),
            (Some(_), Some(_)) => unreachable!("clap rejects both"),
        };
        Ok(ExperimentPlan { method, source, rounds: self.rounds, seed, overrides: self.overrides.clone() })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write metrics, logs and a manifest.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "worldlm")]
        method: Method,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Run several methods and seeds and summarize final leaf perplexity.
    Compare {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',', default_value = "worldlm,flat_fl,local,centralized")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// CSV destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Toggle one component and report the paired perplexity change.
    Ablate {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "worldlm")]
        method: Method,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List presets, or print one as TOML.
    Presets { name: Option<String> },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { source, method, seed, out } => {
            let plan = source.plan(method, seed)?;
            let result = cmd_run(&plan, &out, source.workers).with_context(|| format!("running {}", plan.label()))?;
            let s = result.final_leaf_summary();
            println!(
                "{} round {} seq_step {}: leaf test perplexity {:.4} +/- {:.4} over {} leaves",
                plan.label(),
                s.round,
                s.seq_step,
                s.mean_perplexity,
                s.std_perplexity,
                s.nodes
            );
            println!("wrote {}", out.display());
        }
        Command::Compare { source, methods, seeds, out } => {
            let seeds: Vec<Option<u64>> = if seeds.is_empty() { vec![None] } else { seeds.into_iter().map(Some).collect() };
            let mut plans = Vec::new();
            for &m in &methods {
                for &s in &seeds {
                    plans.push(source.plan(m, s)?);
                }
            }
            let rows = cmd_compare(&plans, source.workers)?;
            emit(&rows, out)?;
        }
        Command::Ablate { source, method, axis, seeds, out } => {
            let rows = cmd_ablate(&source.plan(method, None)?, axis, &seeds, source.workers)?;
            emit(&rows, out)?;
        }
        Command::Presets { name: None } => {
            for p in PRESETS {
                println!("{p}");
            }
        }
        Command::Presets { name: Some(n) } => print!("{}", preset_toml(&n)?),
    }
    Ok(())
}

fn emit<T: rows::Row>(rows: &[T], out: Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            write_csv(&path, rows)?;
            println!("wrote {}", path.display());
        }
        None => {
            for r in rows {
                println!("{}", r.line());
            }
        }
    }
    Ok(())
}

mod rows {
    use hierfed::experiment::{AblationRow, SummaryRow};

    /// Rows that can be written as CSV or printed one per line.
    pub trait Row: serde::Serialize {
        fn line(&self) -> String;
    }

    impl Row for SummaryRow {
        fn line(&self) -> String {
            format!(
                "{} seed={} ppl={:.4}+/-{:.4} ratio={:.4}",
                self.label, self.seed, self.mean_perplexity, self.std_perplexity, self.ratio_to_first
            )
        }
    }

    impl Row for AblationRow {
        fn line(&self) -> String {
            format!(
                "{} seed={} base={:.4} toggled={:.4} delta={:+.4} ({})",
                self.axis, self.seed, self.base_mean, self.toggled_mean, self.delta, self.toggled
            )
        }
    }
}
