use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use egiinet_core::synth::MANIFEST_FILE;
use egiinet_core::train::load_split;
use egiinet_core::{build_dataset, evaluate, visualize_attention, Checkpoint, EvalTable, Manifest, RunConfig, Split, Trainer, Variant};

#[derive(Parser)]
#[command(name = "egiinet", version, about = "View-guided point cloud completion", arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; unspecified keys take preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset supplying every value the config file leaves out.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Overrides the config seed and EGIINET_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Small,
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    GenerateData {
        /// Training samples; defaults to data.train_samples.
        #[arg(long)]
        train: Option<usize>,
        /// Validation samples; defaults to data.val_samples.
        #[arg(long)]
        val: Option<usize>,
    },
    /// Train one variant and write a checkpoint plus metrics.csv.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides the configured variant.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Score a checkpoint on a dataset split and write eval.csv.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; defaults to the one recorded in the checkpoint config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Train and evaluate several variants; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated variants; all five by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Render the cross-attention heatmap for one sample.
    VisualizeAttention {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; defaults to the one recorded in the checkpoint config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Sample id from the manifest; the first validation sample by default.
        #[arg(long)]
        sample: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Dataset manifest file or directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overrides optim.epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let base = match self.preset {
            Preset::Desk => RunConfig::default(),
            Preset::Small => RunConfig::small(),
            Preset::Tiny => RunConfig::tiny(),
        };
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load_over(&base, p)?,
            None => base,
        };
        cfg.apply_env()?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn resolve_manifest(flag: Option<&PathBuf>, cfg: &RunConfig) -> Result<Manifest> {
    let path = flag
        .or(cfg.manifest.as_ref())
        .context("no dataset manifest: pass --manifest or set `manifest` in the config")?;
    Ok(Manifest::load(path)?)
}

fn train_variant(cfg: &RunConfig, manifest: &Manifest, out: &Path) -> Result<Trainer> {
    let train = load_split(manifest, Split::Train)?;
    let val = load_split(manifest, Split::Val)?;
    let mut trainer = Trainer::new(cfg, &train, &val)?;
    eprintln!(
        "training {} on {} samples ({} validation), {} parameters",
        cfg.variant,
        train.len(),
        val.len(),
        trainer.model.params.num_scalars()
    );
    let log = trainer.run(|e| match &e.losses {
        Some(b) => eprintln!(
            "epoch {:>3}  l_total {:.6}  l_l1cd {:.6}  l_transfer {:.6}  val_cd_l2 {:.6}",
            e.epoch, b.l_total, b.l_l1cd, b.l_transfer, e.val_cd_l2
        ),
        None => eprintln!("epoch {:>3}  val_cd_l2 {:.6}", e.epoch, e.val_cd_l2),
    })?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("metrics.csv"), &log.to_csv())?;
    Checkpoint::from_trainer(&trainer).save(&out.join("checkpoint"))?;
    Ok(trainer)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::GenerateData { train, val } => {
            let cfg = common.run_config()?;
            let out = common.out_or("data");
            let n_train = train.unwrap_or(cfg.data.train_samples);
            let n_val = val.unwrap_or(cfg.data.val_samples);
            let manifest = build_dataset(&out, n_train, n_val, &cfg.data, cfg.seed)?;
            println!("{}", out.join(MANIFEST_FILE).display());
            eprintln!("wrote {} samples", manifest.records.len());
        }
        Command::Train { run, variant } => {
            let mut cfg = common.run_config()?;
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            if let Some(e) = run.epochs {
                cfg.optim.epochs = e;
            }
            cfg.validate()?;
            let manifest = resolve_manifest(run.manifest.as_ref(), &cfg)?;
            cfg.manifest = Some(manifest.root.join(MANIFEST_FILE));
            let out = common.out_or(&format!("runs/{}", cfg.variant));
            train_variant(&cfg, &manifest, &out)?;
            println!("{}", out.join("checkpoint").display());
        }
        Command::Eval { checkpoint, manifest, split } => {
            let ck = Checkpoint::load(checkpoint)?;
            let manifest = resolve_manifest(manifest.as_ref(), &ck.config)?;
            let samples = match split {
                SplitArg::Train => load_split(&manifest, Split::Train)?,
                SplitArg::Val => load_split(&manifest, Split::Val)?,
                SplitArg::All => manifest.records.iter().map(|r| manifest.load_sample(r)).collect::<egiinet_core::Result<_>>()?,
            };
            if samples.is_empty() {
                bail!("the selected split has no samples");
            }
            let table = evaluate(&ck.model, &samples, ck.config.fscore_threshold)?;
            let out = common.out_or(".");
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let csv = table.to_csv();
            write(&out.join("eval.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Ablate { run, variants } => {
            let base = common.run_config()?;
            let manifest = resolve_manifest(run.manifest.as_ref(), &base)?;
            let val = load_split(&manifest, Split::Val)?;
            if val.is_empty() {
                bail!("ablation needs validation samples");
            }
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.clone() };
            let out = common.out_or("runs/ablation");
            let mut all = EvalTable::default();
            for v in variants {
                let mut cfg = base.clone();
                cfg.variant = v;
                if let Some(e) = run.epochs {
                    cfg.optim.epochs = e;
                }
                cfg.manifest = Some(manifest.root.join(MANIFEST_FILE));
                cfg.validate()?;
                let trainer = train_variant(&cfg, &manifest, &out.join(v.as_str()))?;
                let table = evaluate(&trainer.model, &val, cfg.fscore_threshold)?;
                if let Some(avg) = table.average() {
                    eprintln!("{v}: cd_l2_x1000 {:.4}  fscore {:.4}", avg.cd_l2_x1000, avg.fscore);
                }
                all.rows.extend(table.rows);
            }
            let csv = all.to_csv();
            write(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::VisualizeAttention { checkpoint, manifest, sample } => {
            let ck = Checkpoint::load(checkpoint)?;
            let manifest = resolve_manifest(manifest.as_ref(), &ck.config)?;
            let record = match sample {
                Some(id) => manifest.records.iter().find(|r| &r.id == id).with_context(|| format!("no sample {id:?} in manifest"))?,
                None => manifest
                    .split(Split::Val)
                    .next()
                    .or(manifest.records.first())
                    .context("manifest is empty")?,
            };
            let s = manifest.load_sample(record)?;
            let out = common.out_or(".");
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join(format!("attention_{}.png", s.id));
            let map = visualize_attention(&ck.model, &s.partial, &s.view, &path)?;
            println!("{}", path.display());
            eprintln!("grid {}x{}, total mass {:.6}", map.grid.0, map.grid.1, map.total_mass());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
