use std::path::PathBuf;

use anyhow::{bail, Result};
use bam::commands::{self, EvalOptions, GeneralizedOptions};
use bam::config::RunConfig;
use bam::dataset::SynthOptions;
use bam_core::ensemble::{KShotFusion, Tap};
use bam_core::eval::{AnnotationMode, Learner};
use bam_core::generalized::FusionScheme;
use bam_core::metrics::IouMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bam", version, about = "Few-shot segmentation with a base learner, a meta learner and an ensemble")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set meta.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the effective configuration before running.
    #[arg(long)]
    show_config: bool,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// Bypass the scene-difference factor.
    #[arg(long)]
    no_psi: bool,
    /// Random ensemble initialisation instead of the identity.
    #[arg(long)]
    no_ensemble_init: bool,
    /// Train the meta learner alone (no ensemble, L_meta only).
    #[arg(long)]
    no_ensemble: bool,
    #[arg(long, value_enum)]
    gram_tap: Option<TapArg>,
    #[arg(long, value_enum)]
    kshot_fusion: Option<FusionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TapArg {
    B1,
    B2,
    B3,
    B4,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Reweight,
    FeatureAvg,
    MaskAvg,
    MaskOr,
}

#[derive(Clone, Copy, ValueEnum)]
enum LearnerArg {
    Bam,
    MetaOnly,
    BaseOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Main,
    Alt,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnnotationArg {
    Mask,
    Bbox,
}

#[derive(Subcommand)]
enum Command {
    /// Generate shapes-world train/val roots.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        /// Training images.
        #[arg(long, default_value_t = 400)]
        images: usize,
        #[arg(long, default_value_t = 120)]
        val_images: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 1: train encoder and base learner on base classes.
    PretrainBase {
        #[command(flatten)]
        common: Common,
        /// Training dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 2: episodic training of meta learner and ensemble.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Novel-class episodes: mIoU and FB-IoU per seed and averaged.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Evaluation dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "bam")]
        learner: LearnerArg,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_enum)]
        annotation: Option<AnnotationArg>,
        #[arg(long, value_enum)]
        kshot_fusion: Option<FusionArg>,
        /// Average IoU per episode instead of pooling over the set.
        #[arg(long)]
        per_episode: bool,
        /// 1000 episodes and 5 seeds.
        #[arg(long)]
        benchmark: bool,
        /// Row name in the results table.
        #[arg(long)]
        label: Option<String>,
        /// JSON results file to create or extend.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Generalized evaluation: novel and base classes labelled together.
    EvaluateGeneralized {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "from_dumps")]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "from_dumps")]
        ckpt: Option<PathBuf>,
        /// Re-fuse maps saved by an earlier `--dump` instead of running the model.
        #[arg(long, conflicts_with_all = ["data", "ckpt"])]
        from_dumps: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated thresholds for the sweep.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
        #[arg(long)]
        results: Option<PathBuf>,
        /// SVG of the threshold sweep.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// JSON file receiving every episode's maps.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Gram-signature cost, C^2 (4HW + 3).
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires_all = ["height", "width"])]
        channels: Option<u64>,
        #[arg(long)]
        height: Option<u64>,
        #[arg(long)]
        width: Option<u64>,
        /// Input side for the per-tap table.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// TAP=RESULTS_JSON pairs for the accuracy-vs-cost plot.
        #[arg(long = "point", value_name = "TAP=FILE")]
        points: Vec<String>,
        #[arg(long, default_value = "bam")]
        method: String,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

fn tap(t: TapArg) -> Tap {
    match t {
        TapArg::B1 => Tap::B1,
        TapArg::B2 => Tap::B2,
        TapArg::B3 => Tap::B3,
        TapArg::B4 => Tap::B4,
    }
}

fn fusion(f: FusionArg) -> KShotFusion {
    match f {
        FusionArg::Reweight => KShotFusion::Reweight,
        FusionArg::FeatureAvg => KShotFusion::FeatureAvg,
        FusionArg::MaskAvg => KShotFusion::MaskAvg,
        FusionArg::MaskOr => KShotFusion::MaskOr,
    }
}

fn scheme(s: SchemeArg) -> FusionScheme {
    match s {
        SchemeArg::Main => FusionScheme::Main,
        SchemeArg::Alt => FusionScheme::Alt,
    }
}

fn load(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
    if common.show_config {
        println!("{}", cfg.to_toml()?);
    }
    Ok(cfg)
}

fn apply_model_flags(cfg: &mut RunConfig, m: &ModelFlags) {
    let e = &mut cfg.model.ensemble;
    if m.no_psi {
        e.use_psi = false;
    }
    if m.no_ensemble_init {
        e.init = bam_core::ensemble::EnsembleInit::Random;
    }
    if m.no_ensemble {
        e.enabled = false;
        cfg.meta.ensemble_loss = false;
    }
    if let Some(t) = m.gram_tap {
        e.gram_tap = tap(t);
    }
    if let Some(f) = m.kshot_fusion {
        e.kshot_fusion = fusion(f);
    }
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::SynthData {
            out,
            classes,
            images,
            val_images,
            size,
            folds,
            seed,
        } => commands::synth(
            &out,
            &SynthOptions {
                classes,
                images,
                val_images,
                size,
                folds,
                seed,
            },
        ),
        Command::PretrainBase {
            common,
            data,
            fold,
            out,
            epochs,
            lr,
            seed,
        } => {
            let mut cfg = load(&common)?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(l) = lr {
                cfg.pretrain.lr = l;
            }
            if let Some(s) = seed {
                cfg.pretrain.seeds = vec![s];
                cfg.model.init_seed = s;
            }
            commands::pretrain(&cfg, &data, fold, &out)
        }
        Command::MetaTrain {
            common,
            data,
            stage1,
            out,
            shots,
            lambda,
            epochs,
            lr,
            seed,
            model,
        } => {
            let mut cfg = load(&common)?;
            if let Some(k) = shots {
                cfg.meta.shots = k;
            }
            if let Some(l) = lambda {
                cfg.meta.lambda = l;
            }
            if let Some(e) = epochs {
                cfg.meta.epochs = e;
            }
            if let Some(l) = lr {
                cfg.meta.lr = l;
            }
            if let Some(s) = seed {
                cfg.meta.seeds = vec![s];
                cfg.model.init_seed = s;
            }
            apply_model_flags(&mut cfg, &model);
            commands::meta(&cfg, &data, &stage1, &out)
        }
        Command::Evaluate {
            common,
            data,
            ckpt,
            learner,
            shots,
            episodes,
            seeds,
            annotation,
            kshot_fusion,
            per_episode,
            benchmark,
            label,
            results,
        } => {
            let mut cfg = load(&common)?;
            if benchmark {
                cfg.eval.episodes = 1000;
                cfg.eval.seeds = (0..5).collect();
            }
            cfg.eval.learner = match learner {
                LearnerArg::Bam => Learner::Bam,
                LearnerArg::MetaOnly => Learner::MetaOnly,
                LearnerArg::BaseOnly => Learner::BaseOnly,
            };
            if let Some(k) = shots {
                cfg.eval.shots = k;
            }
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            if let Some(s) = seeds {
                cfg.eval.seeds = s;
            }
            if let Some(a) = annotation {
                cfg.eval.annotation = match a {
                    AnnotationArg::Mask => AnnotationMode::Mask,
                    AnnotationArg::Bbox => AnnotationMode::Bbox,
                };
            }
            if per_episode {
                cfg.eval.iou_mode = IouMode::PerEpisode;
            }
            let opts = EvalOptions {
                label,
                kshot_fusion: kshot_fusion.map(fusion),
                results,
            };
            commands::evaluate(&cfg, &data, &ckpt, &opts)
        }
        Command::EvaluateGeneralized {
            common,
            data,
            ckpt,
            from_dumps,
            tau,
            scheme: sch,
            shots,
            episodes,
            seeds,
            sweep,
            results,
            plot,
            dump,
        } => {
            let mut cfg = load(&common)?;
            if let Some(t) = tau {
                cfg.generalized.tau = t;
            }
            if let Some(s) = sch {
                cfg.generalized.scheme = scheme(s);
            }
            if let Some(path) = from_dumps {
                return commands::generalized_from_dumps(&path, cfg.generalized.tau, cfg.generalized.scheme);
            }
            if let Some(k) = shots {
                cfg.eval.shots = k;
            }
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            if let Some(s) = seeds {
                cfg.eval.seeds = s;
            }
            if let Some(s) = sweep {
                cfg.generalized.sweep = s;
            }
            let (Some(data), Some(ckpt)) = (data, ckpt) else {
                bail!("--data and --ckpt are required without --from-dumps");
            };
            let opts = GeneralizedOptions { results, plot, dump };
            commands::evaluate_generalized(&cfg, &data, &ckpt, &opts)
        }
        Command::Flops {
            common,
            channels,
            height,
            width,
            image_size,
            points,
            method,
            plot,
        } => {
            if let (Some(c), Some(h), Some(w)) = (channels, height, width) {
                return Ok(commands::flops_single(c, h, w));
            }
            let cfg = load(&common)?;
            let mut parsed = Vec::new();
            for p in &points {
                let Some((t, file)) = p.split_once('=') else {
                    bail!("--point expects TAP=FILE, got {p}");
                };
                let t = TapArg::from_str(t, true).map_err(|e| anyhow::anyhow!(e))?;
                parsed.push((tap(t), PathBuf::from(file)));
            }
            commands::flops_report(&cfg.model, image_size, &parsed, &method, plot.as_deref())
        }
    }
}

fn main() {
    match run(Cli::parse()) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
