use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args as ClapArgs, Parser, Subcommand, ValueEnum};
use rar_core::harness::{
    emit_report, load_dataset, profile_failing_subset, run_cross_domain, run_experiment, save_dataset,
    synthetic_dataset, Baseline, ExperimentConfig, ExperimentOutput,
};
use rar_core::memory::MemoryStore;
use rar_core::{BackendFactory, DeploymentSpec};

/// Staged experiment runs of the router against baselines.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the engine and baselines over shuffled stages of a dataset.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = BaselineArg::All)]
        baseline: BaselineArg,
    },
    /// Replay a dataset against a fixed guide memory from another run.
    CrossDomain {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the items the weak model answers incorrectly.
    Profile {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        backends: Option<PathBuf>,
    },
    /// Generate a synthetic multiple-choice dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "item")]
        prefix: String,
        /// Comma-separated domain labels, assigned round-robin.
        #[arg(long, value_delimiter = ',', default_value = "general")]
        domains: Vec<String>,
    },
}

#[derive(ClapArgs, Debug)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backend description (JSON). Defaults to synthetic models.
    #[arg(long)]
    backends: Option<PathBuf>,
    #[arg(long)]
    shuffles: Option<u32>,
    #[arg(long)]
    stages: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    All,
    Weak,
    Strong,
    Cot,
    Oracle,
}

impl BaselineArg {
    fn baselines(self) -> Vec<Baseline> {
        match self {
            BaselineArg::All => Baseline::ALL.to_vec(),
            BaselineArg::Weak => vec![Baseline::Weak],
            BaselineArg::Strong => vec![Baseline::Strong],
            BaselineArg::Cot => vec![Baseline::Cot],
            BaselineArg::Oracle => vec![Baseline::Oracle],
        }
    }
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_json(&text)?
            }
            None => ExperimentConfig::default(),
        };
        cfg.shuffles = self.shuffles.unwrap_or(cfg.shuffles);
        cfg.stages = self.stages.unwrap_or(cfg.stages);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        Ok(cfg)
    }
}

fn deployment(path: Option<&Path>) -> anyhow::Result<DeploymentSpec> {
    match path {
        Some(p) => DeploymentSpec::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(DeploymentSpec::default()),
    }
}

fn write_output(output: &ExperimentOutput, out: &Path) -> anyhow::Result<ExitCode> {
    emit_report(&output.report, out).with_context(|| format!("writing report to {}", out.display()))?;
    if let Some(error) = &output.report.error {
        eprintln!("run aborted: {error}");
        eprintln!("partial report written to {}", out.display());
        return Ok(ExitCode::FAILURE);
    }
    eprintln!("report written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> anyhow::Result<ExitCode> {
    rar_cli::init_logging();
    match Cli::parse().command {
        Command::Run {
            dataset,
            out,
            common,
            baseline,
        } => {
            let mut cfg = common.config()?;
            cfg.baselines = baseline.baselines();
            let items = load_dataset(&dataset)?;
            let spec = deployment(common.backends.as_deref())?;
            let output = run_experiment(&cfg, &items, &spec)?;
            // The memory the first shuffle ended with, for cross-domain runs.
            if let Some(memory) = output.memories.first() {
                std::fs::create_dir_all(&out)?;
                memory.persist(out.join("memory.jsonl"))?;
            }
            write_output(&output, &out)
        }
        Command::CrossDomain {
            memory,
            dataset,
            out,
            common,
        } => {
            let cfg = common.config()?;
            let store = MemoryStore::load(cfg.engine.embedding_dim, &memory)
                .with_context(|| format!("loading {}", memory.display()))?;
            let items = load_dataset(&dataset)?;
            let spec = deployment(common.backends.as_deref())?;
            let output = run_cross_domain(&cfg, &store, &items, &spec)?;
            if let Some(summary) = &output.report.cross_domain {
                eprintln!(
                    "weak-aligned with guides {:?} vs unguided {:?}",
                    summary.rar_weak_aligned, summary.baseline_aligned
                );
            }
            write_output(&output, &out)
        }
        Command::Profile { dataset, out, backends } => {
            let items = load_dataset(&dataset)?;
            let spec = deployment(backends.as_deref())?;
            let answers = std::sync::Arc::new(items.iter().map(|i| (i.id.clone(), i.answer_label)).collect());
            let weak = spec
                .backends(ExperimentConfig::default().engine.embedding_dim, Some(answers))?
                .weak;
            let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            let failing = runtime.block_on(profile_failing_subset(&items, weak.as_ref()))?;
            save_dataset(&out, &failing).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} of {} items fail on the weak model", failing.len(), items.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            out,
            count,
            seed,
            prefix,
            domains,
        } => {
            let items = synthetic_dataset(count, seed, &prefix, &domains);
            save_dataset(&out, &items).with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
