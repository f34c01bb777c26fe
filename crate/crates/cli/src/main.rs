use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mshllm::commands::{
    cmd_ablate, cmd_eval, cmd_grid, cmd_synth, cmd_train, cmd_transfer, default_out_dir, dump_prompts, report,
    resolve_data_path, TrainOptions,
};
use mshllm::config::{Protocol, RunConfig, Variant};
use mshllm::synth::SynthSpec;
use mshllm::{Error, Result};

#[derive(Parser)]
#[command(name = "mshllm", version, about = "Multi-scale hypergraph forecaster with a frozen sequence backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Versioned TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Structural ablation, e.g. `wo_hm` or `-w/o HM`.
    #[arg(long, allow_hyphen_values = true)]
    variant: Option<String>,
    /// Fraction of input entries to zero out before training.
    #[arg(long)]
    mask: Option<f64>,
    /// Train on this chronological fraction of the training split.
    #[arg(long)]
    few_shot: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a starter configuration for the synthetic two-season dataset.
    Init {
        #[arg(long, default_value = "config.toml")]
        out: PathBuf,
    },
    /// Generate a synthetic two-channel series (periods 24 and 168) as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        length: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, evaluate on the test split and write artifacts.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Sample this many configurations from the search grid and keep the best.
        #[arg(long)]
        grid: Option<usize>,
        /// Print the rendered prompts for the first test window, then exit.
        #[arg(long)]
        dump_prompts: bool,
        /// Write hyperedge embeddings after every epoch.
        #[arg(long)]
        export_embeddings: bool,
    },
    /// Evaluate a checkpoint against the configuration it was trained with.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train on one configuration and score another dataset without updates.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        /// Configuration describing the target dataset.
        #[arg(long)]
        target: PathBuf,
    },
    /// Run one ablation, or all of them with `--variant all`.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the rendered prompts for the first test window.
    DumpPrompts {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn load(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    resolve_data_path(&mut cfg, path);
    Ok(cfg)
}

fn configure(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = load(&run.config)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(rate) = run.mask {
        cfg.mask_rate = rate;
    }
    if let Some(fraction) = run.few_shot {
        cfg.protocol = Protocol::FewShot { fraction };
    }
    if let Some(v) = &run.variant {
        if v != "all" {
            Variant::parse(v)?.apply(&mut cfg);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(run: &RunArgs, cfg: &RunConfig) -> PathBuf {
    run.out.clone().unwrap_or_else(|| default_out_dir(cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { out } => {
            RunConfig::synthetic_default().save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Synth { out, length, noise, seed } => {
            let ds = cmd_synth(&SynthSpec::two_season(length, noise, seed), &out)?;
            println!("wrote {} ({} rows, {} channels)", out.display(), ds.len(), ds.channels());
        }
        Command::Train {
            run,
            grid,
            dump_prompts: dump,
            export_embeddings,
        } => {
            let mut cfg = configure(&run)?;
            if dump {
                print!("{}", dump_prompts(&cfg)?);
                return Ok(());
            }
            let out = out_dir(&run, &cfg);
            if let Some(budget) = grid {
                let g = cmd_grid(&cfg, budget, &out.join("grid"))?;
                println!("grid: best run {} of {}", g.best_index, g.summary_csv.lines().count() - 1);
                cfg = g.best_config;
            }
            let o = cmd_train(&cfg, &out, &TrainOptions { export_embeddings })?;
            println!("{}", report(&o.records));
            println!("artifacts in {} (config {})", out.display(), o.config_hash);
        }
        Command::Eval { run, checkpoint } => {
            let cfg = configure(&run)?;
            let records = cmd_eval(&cfg, &checkpoint, run.out.as_deref())?;
            println!("{}", report(&records));
        }
        Command::Transfer { run, target } => {
            let source = configure(&run)?;
            let target = load(&target)?;
            let out = out_dir(&run, &source).join("transfer");
            let records = cmd_transfer(&source, &target, &out)?;
            println!("{}", report(&records));
        }
        Command::Ablate { run } => {
            let name = run
                .variant
                .clone()
                .ok_or_else(|| Error::Config("ablate needs --variant (or --variant all)".into()))?;
            let mut base = run_config_without_variant(&run)?;
            base.variant = Variant::Full;
            let out = run.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_ablate", base.name)));
            let variants = if name == "all" { Variant::ALL.to_vec() } else { vec![Variant::parse(&name)?] };
            let mut first_err = None;
            for v in variants {
                match cmd_ablate(&base, v, &out) {
                    Ok(o) => println!("== {}\n{}", v.label(), report(&o.records)),
                    // keep going so one incompatible variant does not hide the rest
                    Err(e) if name == "all" => {
                        eprintln!("== {}: {e}", v.label());
                        first_err.get_or_insert(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Command::DumpPrompts { run } => print!("{}", dump_prompts(&configure(&run)?)?),
    }
    Ok(())
}

fn run_config_without_variant(run: &RunArgs) -> Result<RunConfig> {
    let args = RunArgs {
        config: run.config.clone(),
        seed: run.seed,
        out: None,
        variant: None,
        mask: run.mask,
        few_shot: run.few_shot,
    };
    configure(&args)
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
