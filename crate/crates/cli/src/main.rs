//! `pseudoseg` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pseudoseg::config::{PipelineConfig, Preset};
use pseudoseg::cyclegan::{
    pretrain_vae, pseudo_label_dice_against, read_pseudo_labels, write_pseudo_labels,
    write_vae_log, PretrainedVae, Stage1Trainer,
};
use pseudoseg::data::SplitName;
use pseudoseg::maskgen::{generate_mask_set, load_auxiliary_masks, Canvas, EllipsePrior, MaskSet};
use pseudoseg::metrics::{evaluate, write_overlay, Segmenter};
use pseudoseg::noisy::{iterative_train, lqss_select, rounds_csv, SegLoss, SegmentationModel};
use pseudoseg::pipeline::{
    auxiliary_masks, bench_synthetic, load_dataset, render_dataset, synthetic_dataset, vae_masks,
    write_dataset,
};
use pseudoseg::{Error, Result};

const OUT_ROOT_ENV: &str = "PSEUDOSEG_OUT_ROOT";
const DEVICE_ENV: &str = "PSEUDOSEG_DEVICE";

#[derive(Parser)]
#[command(
    name = "pseudoseg",
    version,
    about = "Segmentation from unpaired shape priors and pseudo labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shape-mask generation.
    Maskgen {
        #[command(subcommand)]
        action: MaskgenCmd,
    },
    /// Synthetic image rendering.
    Synth {
        #[command(subcommand)]
        action: SynthCmd,
    },
    /// Shape VAE pretraining.
    Vae {
        #[command(subcommand)]
        action: VaeCmd,
    },
    /// Stage 1: adversarial image-to-mask translation; exports pseudo labels.
    TrainStage1(TrainStage1Args),
    /// Pseudo-label export from stage-1 checkpoints.
    Pseudo {
        #[command(subcommand)]
        action: PseudoCmd,
    },
    /// Stage 2: selection plus iterative training on pseudo labels.
    TrainStage2(TrainStage2Args),
    /// Scores a segmentation model on a data split.
    Evaluate(EvaluateArgs),
    /// End-to-end runs on generated data.
    Bench {
        #[command(subcommand)]
        action: BenchCmd,
    },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config; keys override the preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when the config names none.
    #[arg(long, value_enum, default_value_t = PresetArg::Tiny)]
    preset: PresetArg,
    /// Overrides the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Micro,
    Tiny,
    Small,
    Full,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Micro => Preset::Micro,
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::Small => Preset::Small,
            PresetArg::Full => Preset::Full,
        }
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path, self.preset.into())?,
            None => PipelineConfig::preset(self.preset.into(), 0),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.assign_seeds();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum MaskgenCmd {
    /// Writes `mask_00000.png`, ... drawn from the ellipse prior.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Minor-axis range in mm, `lo:hi`.
        #[arg(long, value_parser = parse_range)]
        minor_mm: Option<(f64, f64)>,
        /// Aspect-ratio range, `lo:hi`.
        #[arg(long, value_parser = parse_range)]
        aspect: Option<(f64, f64)>,
        /// Canvas side in pixels (tiny preset by default).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        pixel_mm: Option<f64>,
        #[arg(long)]
        circle: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Renders images from masks and writes `images/`, `labels/`, `split.csv`.
    Render {
        /// Masks to render; generated from the config when omitted.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum VaeCmd {
    /// Trains the shape VAE and writes `vae.safetensors`.
    Pretrain {
        /// Training masks; generated from the config when omitted.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainStage1Args {
    /// Dataset directory (`images/`, `split.csv`).
    #[arg(long)]
    data: PathBuf,
    /// Auxiliary masks; generated from the config when omitted.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Pretrained VAE checkpoint.
    #[arg(long)]
    vae: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue from `<out>/checkpoints`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PseudoCmd {
    /// Writes pseudo labels and `manifest.csv` for one split.
    Export {
        /// Directory with the stage-1 `*.safetensors` files.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainStage2Args {
    /// Pseudo-label manifest (`id,mask_path,score`).
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Start every round from freshly initialized weights.
    #[arg(long)]
    reinit_each_round: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Segmentation model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Also write contour overlays to `<out>/overlays`.
    #[arg(long)]
    overlays: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Full pipeline on generated shapes; prints the summary as JSON.
    Synthetic {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also run stage 2 with plain Dice for comparison.
        #[arg(long)]
        compare_plain_dice: bool,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Dice,
    NoiseWeightedDice,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

/// Relative output paths live under `PSEUDOSEG_OUT_ROOT` when it is set.
fn out_dir(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if d != "cpu" => Err(Error::Config(format!(
            "{DEVICE_ENV}={d} is not supported; only `cpu` is available"
        ))),
        _ => Ok(()),
    }
}

fn load_masks(dir: &Path, cfg: &PipelineConfig) -> Result<MaskSet> {
    load_auxiliary_masks(dir, cfg.maskgen.canvas.size, cfg.maskgen.canvas.pixel_mm)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    check_device()?;
    match cli.command {
        Command::Maskgen {
            action:
                MaskgenCmd::Generate {
                    n,
                    seed,
                    minor_mm,
                    aspect,
                    size,
                    pixel_mm,
                    circle,
                    out,
                },
        } => {
            let base = PipelineConfig::preset(Preset::Tiny, seed).maskgen;
            let prior = EllipsePrior {
                minor_axis_mm: minor_mm.unwrap_or(base.prior.minor_axis_mm),
                aspect_ratio: aspect.unwrap_or(base.prior.aspect_ratio),
                circle,
            };
            let canvas = Canvas {
                size: size.unwrap_or(base.canvas.size),
                pixel_mm: pixel_mm.unwrap_or(base.canvas.pixel_mm),
            };
            let out = out_dir(&out);
            generate_mask_set(n, &prior, &canvas, seed)?.save_dir(&out)?;
            let params =
                serde_json::json!({ "n": n, "seed": seed, "prior": prior, "canvas": canvas });
            write_json(&out.join("maskgen.json"), &params)?;
            println!("wrote {n} masks to {}", out.display());
        }
        Command::Synth {
            action: SynthCmd::Render { masks, cfg, out },
        } => {
            let cfg = cfg.resolve()?;
            let out = out_dir(&out);
            let split = match masks {
                Some(dir) => render_dataset(&load_masks(&dir, &cfg)?, &cfg)?,
                None => synthetic_dataset(&cfg)?,
            };
            write_dataset(&out, &split)?;
            cfg.write(&out.join("config.toml"))?;
            println!(
                "rendered {} train / {} val / {} test images into {}",
                split.split.train.len(),
                split.split.val.len(),
                split.split.test.len(),
                out.display()
            );
        }
        Command::Vae {
            action: VaeCmd::Pretrain { masks, cfg, out },
        } => {
            let cfg = cfg.resolve()?;
            let out = out_dir(&out);
            let (generated, heldout) = vae_masks(&cfg)?;
            let train = match masks {
                Some(dir) => load_masks(&dir, &cfg)?,
                None => generated,
            };
            let vae = pretrain_vae(&train, &cfg.vae)?;
            std::fs::create_dir_all(&out)?;
            cfg.write(&out.join("config.toml"))?;
            vae.save(&out.join("vae.safetensors"))?;
            write_vae_log(&out.join("epochs.csv"), &vae.log)?;
            let dice = vae.reconstruction_dice(&heldout.masks)?;
            write_json(
                &out.join("vae_report.json"),
                &serde_json::json!({ "heldout_reconstruction_dice": dice, "heldout_masks": heldout.len() }),
            )?;
            println!("held-out reconstruction dice {dice:.4}");
        }
        Command::TrainStage1(a) => {
            let cfg = a.cfg.resolve()?;
            let out = out_dir(&a.out);
            let data = load_dataset(&a.data, &cfg)?;
            let aux = match &a.masks {
                Some(dir) => load_masks(dir, &cfg)?,
                None => auxiliary_masks(&cfg)?,
            };
            let vae = PretrainedVae::load(&a.vae)?;
            let mut trainer = Stage1Trainer::new(cfg.stage1, vae)?;
            if a.resume {
                trainer.resume(&out.join("checkpoints"))?;
            }
            cfg.write(&out.join("config.toml"))?;
            trainer.fit(&data.split.train, &aux, &data.split.val, Some(&out))?;
            let records = trainer.pseudo_labels(&data.split.train)?;
            write_pseudo_labels(&out.join("pseudo_labels"), &records)?;
            if data.withheld.len() == records.len() {
                let dice = pseudo_label_dice_against(&records, &data.withheld)?;
                write_json(
                    &out.join("stage1_report.json"),
                    &serde_json::json!({ "pseudo_label_dice": dice }),
                )?;
                println!("pseudo-label dice {dice:.4}");
            }
            println!(
                "wrote {} pseudo labels to {}",
                records.len(),
                out.join("pseudo_labels").display()
            );
        }
        Command::Pseudo {
            action:
                PseudoCmd::Export {
                    checkpoints,
                    data,
                    split,
                    cfg,
                    out,
                },
        } => {
            let cfg = cfg.resolve()?;
            let out = out_dir(&out);
            let data = load_dataset(&data, &cfg)?;
            let vae = PretrainedVae::load(&checkpoints.join("vae.safetensors"))?;
            let mut trainer = Stage1Trainer::new(cfg.stage1, vae)?;
            trainer.resume(&checkpoints)?;
            let samples = match split {
                SplitArg::Train => &data.split.train,
                SplitArg::Val => &data.split.val,
                SplitArg::Test => &data.split.test,
            };
            let records = trainer.pseudo_labels(samples)?;
            write_pseudo_labels(&out, &records)?;
            cfg.write(&out.join("config.toml"))?;
            println!("wrote {} pseudo labels to {}", records.len(), out.display());
        }
        Command::TrainStage2(a) => {
            let mut cfg = a.cfg.resolve()?;
            if let Some(loss) = a.loss {
                cfg.stage2.loss = match loss {
                    LossArg::Dice => SegLoss::Dice,
                    LossArg::NoiseWeightedDice => SegLoss::NoiseWeightedDice,
                };
            }
            cfg.stage2.reinit_each_round |= a.reinit_each_round;
            let out = out_dir(&a.out);
            let data = load_dataset(&a.data, &cfg)?;
            let records = read_pseudo_labels(&a.pseudo)?;
            let selected = lqss_select(&records, &cfg.lqss)?;
            let outcome = iterative_train(
                &selected,
                &data.split.train,
                &data.split.val,
                &cfg.stage2,
                cfg.spacing(),
                None,
            )?;
            std::fs::create_dir_all(&out)?;
            cfg.write(&out.join("config.toml"))?;
            std::fs::write(out.join("rounds.csv"), rounds_csv(&outcome.rounds))?;
            outcome.model.save(&out.join("model.safetensors"))?;
            println!(
                "kept {} of {} pseudo labels; best round {} (val dice {:.4})",
                selected.len(),
                records.len(),
                outcome.best_round,
                outcome.best_val_dice
            );
        }
        Command::Evaluate(a) => {
            let cfg = a.cfg.resolve()?;
            let out = out_dir(&a.out);
            let data = load_dataset(&a.data, &cfg)?;
            let model = SegmentationModel::load(&a.model)?;
            let samples: Vec<_> = match a.split {
                SplitArg::Train => data
                    .split
                    .train
                    .into_iter()
                    .map(|s| match data.withheld.get(&s.id) {
                        Some(gt) => s.with_gt(gt.clone()),
                        None => Ok(s),
                    })
                    .collect::<Result<_>>()?,
                SplitArg::Val => data.split.val,
                SplitArg::Test => data.split.test,
            };
            let report = evaluate(&model, &samples, cfg.spacing())?;
            std::fs::create_dir_all(&out)?;
            cfg.write(&out.join("config.toml"))?;
            report.write(&out.join("eval.csv"), &out.join("eval.json"))?;
            if a.overlays {
                let dir = out.join("overlays");
                std::fs::create_dir_all(&dir)?;
                for s in &samples {
                    write_overlay(
                        &dir.join(format!("{}.png", s.id)),
                        s,
                        &model.predict(s)?.binarized(0.5),
                    )?;
                }
            }
            let split = match a.split {
                SplitArg::Train => SplitName::Train,
                SplitArg::Val => SplitName::Val,
                SplitArg::Test => SplitName::Test,
            };
            println!(
                "{} dice {:.4} ± {:.4}, assd {:.3} ({} undefined)",
                split.as_str(),
                report.dice.mean,
                report.dice.std,
                report.assd.mean,
                report.assd_excluded
            );
        }
        Command::Bench {
            action:
                BenchCmd::Synthetic {
                    cfg,
                    compare_plain_dice,
                    out,
                },
        } => {
            let cfg = cfg.resolve()?;
            let out = out_dir(&out);
            let report = bench_synthetic(&cfg, compare_plain_dice, Some(&out))?;
            let text = serde_json::to_string_pretty(&report.summary_json())
                .map_err(|e| Error::Data(e.to_string()))?;
            println!("{text}");
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\\', "\\\\").replace('"', "\\\"");
            eprintln!("error kind={} message=\"{message}\"", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}
