use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use factlab::pipeline::{Strategy, TargetMode};
use factlab::run::{self, PipelineConfig, Precision, RunDir};
use factlab_tensor::Real;

const CONFIG_FILE: &str = "config.toml";

/// Fact-editing lab: build a synthetic world, pretrain a toy transformer,
/// localize the recall circuit and compare editing strategies.
#[derive(Parser, Debug)]
#[command(name = "factlab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, env = "FACTLAB_RUN_ROOT", default_value = "factlab-run")]
    run_root: PathBuf,

    /// TOML config; defaults to the run root's config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for world, model init, training order and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// f32 | f64
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,

    /// localized | all-modules
    #[arg(long, global = true, value_parser = parse_target_mode)]
    target_mode: Option<TargetMode>,

    /// Evaluate 10 sampled repeats per paraphrase (temperature 0.7).
    #[arg(long, global = true)]
    sampled_repeats: bool,

    /// Pretraining step budget.
    #[arg(long, global = true)]
    pretrain_steps: Option<usize>,

    /// Optimizer steps per adapter stage.
    #[arg(long, global = true)]
    edit_steps: Option<usize>,

    /// Adapter learning rate.
    #[arg(long, global = true)]
    edit_lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the fact world and its datasets.
    Genworld,
    /// Pretrain the base model until the entrenchment gate passes.
    Pretrain,
    /// Localize the modules that recall the edit fact.
    Localize,
    /// Train an editing strategy on the pretrained base.
    Edit {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
    },
    /// Evaluate an edited model, or the base when no strategy is given.
    Eval {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
    },
    /// Render the strategy comparison table.
    Report,
    /// Run every stage and all three strategies.
    All,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: factlab::Error| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: factlab::Error| e.to_string())
}

fn parse_target_mode(s: &str) -> Result<TargetMode, String> {
    s.parse().map_err(|e: factlab::Error| e.to_string())
}

fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// File config (explicit, else the run's saved one, else defaults) with flags on top.
fn effective_config(common: &Common) -> Result<PipelineConfig> {
    let saved = common.run_root.join(CONFIG_FILE);
    let mut config = match &common.config {
        Some(path) => load_config(path)?,
        None if saved.exists() => load_config(&saved)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(p) = common.precision {
        config.precision = p;
    }
    if let Some(m) = common.target_mode {
        config.target_mode = m;
    }
    if common.sampled_repeats {
        config.eval.sampled_repeats = true;
    }
    if let Some(n) = common.pretrain_steps {
        config.pretrain.max_steps = n;
    }
    if let Some(n) = common.edit_steps {
        config.edit.steps = n;
    }
    if let Some(lr) = common.edit_lr {
        config.edit.lr = lr;
    }
    Ok(config)
}

fn write_config(root: &Path, config: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(root).with_context(|| format!("creating run root {}", root.display()))?;
    let text = toml::to_string_pretty(config).context("serializing config")?;
    let path = root.join(CONFIG_FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn execute<F: Real>(command: &Command, run: &RunDir, config: &PipelineConfig) -> Result<()> {
    match command {
        Command::Genworld => {
            let w = run::genworld(run, config)?;
            println!("world: {} facts, vocab {}, hash {}", w.facts, w.vocab_size, w.hash);
        }
        Command::Pretrain => {
            let log = run::pretrain::<F>(run, config, |g| {
                eprintln!(
                    "step {:>5}: f1 {:.3} control {:.3}{}",
                    g.step,
                    g.f1_accuracy,
                    g.control_accuracy,
                    if g.passed { " (gate passed)" } else { "" }
                )
            })?;
            println!(
                "base: gate passed at step {}, held-out perplexity {:.4}, hash {}",
                log.steps, log.heldout_perplexity, log.model_hash
            );
        }
        Command::Localize => {
            let report = run::run_localize::<F>(run, config)?;
            if report.converged.is_empty() {
                println!("localization: no module met the rule; edits will target all modules");
            } else {
                println!("localization: {}", report.converged.join(", "));
            }
        }
        Command::Edit { strategy } => {
            let record = run::edit::<F>(run, config, *strategy)?;
            let last: Vec<String> = record
                .stages
                .iter()
                .map(|s| format!("{} loss {:.4}", s.name, s.losses.last().unwrap_or(f64::NAN)))
                .collect();
            println!(
                "{}: {} target modules ({:?}), {}, adapter {}",
                strategy,
                record.targets.len(),
                record.target_source,
                last.join(", "),
                record.adapter_hash
            );
        }
        Command::Eval { strategy } => {
            let m = run::run_eval::<F>(run, config, *strategy)?;
            let name = strategy.map_or("base".to_string(), |s| s.to_string());
            println!(
                "{name}: f2 {:.4} f1-forget {:.4} control {:.4} perplexity {:.4}",
                m.f2_accuracy, m.f1_forget_rate, m.fcontrol_accuracy, m.heldout_perplexity
            );
        }
        Command::Report => print!("{}", run::report(run)?),
        Command::All => print!("{}", run::run_all::<F>(run, config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = effective_config(&cli.common).and_then(|config| {
        if !matches!(cli.command, Command::Report) {
            write_config(&cli.common.run_root, &config)?;
        }
        let run = RunDir::new(&cli.common.run_root);
        match config.precision {
            Precision::F32 => execute::<f32>(&cli.command, &run, &config),
            Precision::F64 => execute::<f64>(&cli.command, &run, &config),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
