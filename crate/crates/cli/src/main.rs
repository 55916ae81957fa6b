use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use greedyprune::criteria::parse_pool;
use greedyprune::data::DatasetSpec;
use greedyprune::{CosineForm, RunConfig, StepMode};
use greedyprune_cli::ablate::{cmd_ablate, Study};
use greedyprune_cli::manifest::{self, RunManifest};
use greedyprune_cli::{cmd_eval, cmd_prune, cmd_report, cmd_train};

#[derive(Parser, Debug)]
#[command(name = "greedyprune", version, about = "Loss-aware greedy filter pruning for CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train, prune at the configured epoch, and keep training the slim network.
    Prune(RunArgs),
    /// Train for the whole schedule without pruning.
    Train(RunArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Rebuild reports from a pruning log.
    Report {
        log: PathBuf,
        /// Cross-check per-layer counts against this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Sweep one hyperparameter over a grid and several seeds.
    Ablate {
        /// prune-epoch, criteria-pool, rmax or ps
        study: Study,
        /// Grid values separated by `;` (criteria pools join with `+` or `,`).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        seeds: Vec<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML manifest; may name a `preset` to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    dtype: Option<String>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Use synthetic data with this many images instead of CIFAR-10.
    #[arg(long)]
    synthetic: Option<usize>,
    #[command(flatten)]
    overrides: ConfigArgs,
}

/// One flag per `RunConfig` field.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    #[arg(long)]
    prune_epoch: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    target_rate: Option<f64>,
    #[arg(long)]
    step_rate: Option<f64>,
    #[arg(long)]
    max_layer_rate: Option<f64>,
    #[arg(long)]
    finetune_interval: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    probe_size: Option<usize>,
    #[arg(long)]
    balanced_probe: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated, e.g. `l1,l2,eucl,cos`.
    #[arg(long)]
    criteria: Option<String>,
    #[arg(long)]
    step_mode: Option<StepMode>,
    #[arg(long)]
    cosine_form: Option<CosineForm>,
    #[arg(long)]
    overshoot_guard: Option<bool>,
    #[arg(long)]
    probe_cache_mb: Option<usize>,
    #[arg(long)]
    late_prune_ok: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lr_decay_at: Option<Vec<f64>>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    crop_padding: Option<usize>,
}

macro_rules! set {
    ($cfg:ident, $args:ident; $($f:ident),*) => {
        $(if let Some(v) = $args.$f.clone() { $cfg.$f = v; })*
    };
}

impl ConfigArgs {
    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        let a = self;
        set!(c, a; max_epochs, target_rate, step_rate, max_layer_rate, finetune_interval, finetune_epochs,
            probe_size, balanced_probe, seed, step_mode, cosine_form, overshoot_guard, probe_cache_mb,
            late_prune_ok, lr, momentum, weight_decay, batch_size, eval_batch_size, lr_decay_at, lr_gamma,
            augment, crop_padding);
        if let Some(e) = a.prune_epoch {
            c.prune_epoch = Some(e);
        }
        if let Some(pool) = &a.criteria {
            c.criteria = parse_pool(pool)?;
        }
        Ok(())
    }
}

impl RunArgs {
    fn manifest(&self) -> Result<RunManifest> {
        let mut m = match (&self.config, &self.preset) {
            (Some(path), None) => RunManifest::load(path)?,
            (None, Some(name)) => manifest::preset(name)?,
            (None, None) => RunManifest::default(),
            (Some(_), Some(_)) => bail!("--config and --preset are exclusive; put `preset = ...` in the file instead"),
        };
        if let Some(out) = &self.out {
            m.output_dir = out.clone();
        }
        if let Some(arch) = &self.arch {
            m.arch = arch.clone();
        }
        if let Some(dtype) = &self.dtype {
            m.dtype = dtype.clone();
        }
        if let Some(n) = self.synthetic {
            m.dataset = DatasetSpec::synthetic(10, n, [3, 32, 32], m.config.seed);
        }
        self.overrides.apply(&mut m.config)?;
        m.resolve_data_root(self.data_root.as_deref())?;
        m.validate()?;
        Ok(m)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prune(args) => {
            let o = cmd_prune(&args.manifest()?)?;
            println!(
                "pruning rate {:.4}, final accuracy {:.2}%, status {:?}; outputs in {}",
                o.log.final_rate(),
                100.0 * o.final_accuracy,
                o.log.footer.as_ref().map(|f| f.status),
                o.output_dir.display()
            );
        }
        Command::Train(args) => {
            let o = cmd_train(&args.manifest()?)?;
            println!("final accuracy {:.2}%; outputs in {}", 100.0 * o.final_accuracy, o.output_dir.display());
        }
        Command::Eval { checkpoint, run } => {
            let m = run.manifest()?;
            let s = cmd_eval(&checkpoint, &m.dataset, m.config.eval_batch_size)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Report { log, checkpoint, out } => {
            let r = cmd_report(&log, checkpoint.as_deref(), &out)?;
            for c in &r.criteria {
                println!("{:>5}  {:>6} filters  {:>5.1}%", c.criterion, c.filters_pruned, 100.0 * c.share);
            }
            println!("reports written to {}", out.display());
        }
        Command::Ablate { study, grid, seeds, run } => {
            let m = run.manifest()?;
            let grid: Vec<String> = match grid {
                Some(g) => g.split([';', '|']).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                None => study.default_grid(&m.config),
            };
            let summary = cmd_ablate(study, &grid, &seeds, &m)?;
            print!("{}", summary.to_markdown(study));
        }
        Command::Presets => {
            for p in manifest::PRESETS {
                println!("{:<26} {}", p.name, p.about);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
