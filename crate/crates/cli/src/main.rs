use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bwssl::experiment::{
    load_splits, restore_model, run_corruption, run_diagnostics, run_experiment_on, run_probe, run_training,
    ExperimentConfig, CONFIG_FILE, FINAL_CHECKPOINT,
};
use bwssl::plotdata::emit_plotdata;
use bwssl::presets::{preset, Scale, PRESETS};

#[derive(Parser)]
#[command(name = "bwssl", version, about = "Blockwise self-supervised training and evaluation")]
struct Cli {
    /// Worker threads; 1 makes every output bitwise reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory that relative dataset paths resolve against.
    #[arg(long, global = true, env = "BWSSL_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate; defaults to the final checkpoint in `--out`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Train, then probe, diagnose and (if configured) corruption-evaluate.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Stop after training and the final checkpoint.
        #[arg(long)]
        skip_eval: bool,
    },
    /// Linear probes on every block prefix of a checkpoint.
    Probe(EvalArgs),
    /// Feature cross-correlation statistics of a checkpoint.
    Diagnose(EvalArgs),
    /// Probe error under synthetic image corruptions.
    CorruptEval(EvalArgs),
    /// Tidy CSV tables from a run or preset directory.
    EmitPlotdata { dir: PathBuf },
    /// Run every variant of a named experiment family.
    Preset {
        /// Preset name; `list` prints the available ones.
        name: String,
        #[arg(long, value_enum, default_value = "desk")]
        scale: ScaleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the variant configs without running them.
        #[arg(long)]
        dry_run: bool,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn evaluate(cli: &Cli, args: &EvalArgs, what: &str) -> Result<()> {
    let cfg = load_config(&args.run)?;
    let splits = load_splits(&cfg, cli.data_dir.as_deref())?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.run.out.join(FINAL_CHECKPOINT));
    let model = restore_model(&cfg, &splits.train, &ckpt)?;
    let out = &args.run.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match what {
        "probe" => {
            let (report, _) = run_probe(&cfg, &model, &splits, out)?;
            for e in &report.entries {
                println!("block {}: top-1 {:.4} (lr {})", e.block, e.top1, e.lr);
            }
        }
        "diagnose" => {
            let (trained, random) = run_diagnostics(&cfg, &model, &splits, out)?;
            for (k, b) in trained.blocks.iter().enumerate() {
                let base = random.as_ref().map(|r| r.blocks[k].on_mean);
                println!(
                    "block {}: on-diagonal mean {:.4}, off-diagonal |mean| {:.4}{}",
                    b.block,
                    b.on_mean,
                    b.off_abs_mean,
                    base.map(|m| format!(", random init {m:.4}")).unwrap_or_default()
                );
            }
        }
        _ => {
            let (_, clf) = run_probe(&cfg, &model, &splits, out)?;
            let report = run_corruption(&cfg, &model, &clf, &splits.val, out)?;
            println!("clean error {:.4}", report.clean_error);
            for r in &report.rows {
                println!("{}: mean {:.4} std {:.4}", r.kind.name(), r.mean_error, r.std_error);
            }
        }
    }
    Ok(())
}

fn run_preset(cli: &Cli, name: &str, scale: Scale, seed: u64, out: &Path, dry_run: bool) -> Result<()> {
    let variants = preset(name, scale, seed, out)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for cfg in &variants {
        let dir = out.join(&cfg.name);
        if dry_run {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join(CONFIG_FILE), cfg.to_json()?)?;
            println!("{}", dir.join(CONFIG_FILE).display());
            continue;
        }
        let start = Instant::now();
        let splits = load_splits(cfg, cli.data_dir.as_deref())?;
        let summary = run_experiment_on(cfg, &splits, &dir)?;
        let last = summary.probe.as_ref().and_then(|p| p.entries.last()).map(|e| e.top1);
        println!(
            "{name}/{}: {} steps, final-block top-1 {}, {:.0}s",
            cfg.name,
            summary.steps,
            last.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
            start.elapsed().as_secs_f64()
        );
    }
    if !dry_run {
        for p in emit_plotdata(out)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Train { run, skip_eval } => {
            let cfg = load_config(run)?;
            let splits = load_splits(&cfg, cli.data_dir.as_deref())?;
            let start = Instant::now();
            if *skip_eval {
                std::fs::create_dir_all(&run.out)?;
                std::fs::write(run.out.join(CONFIG_FILE), cfg.to_json()?)?;
                let (_, report) = run_training(&cfg, &splits, &run.out)?;
                println!("{} steps in {:.0}s", report.steps, start.elapsed().as_secs_f64());
            } else {
                let summary = run_experiment_on(&cfg, &splits, &run.out)?;
                println!("{}", serde_json::to_string_pretty(&summary)?);
            }
        }
        Command::Probe(args) => evaluate(cli, args, "probe")?,
        Command::Diagnose(args) => evaluate(cli, args, "diagnose")?,
        Command::CorruptEval(args) => evaluate(cli, args, "corrupt")?,
        Command::EmitPlotdata { dir } => {
            for p in emit_plotdata(dir)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Preset {
            name,
            scale,
            seed,
            out,
            dry_run,
        } => {
            if name == "list" {
                PRESETS.iter().for_each(|p| println!("{p}"));
                return Ok(());
            }
            let scale = match scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::Smoke => Scale::Smoke,
            };
            let out = out.clone().unwrap_or_else(|| PathBuf::from("out").join(name));
            run_preset(cli, name, scale, *seed, &out, *dry_run)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
