mod config;
mod ops;
mod pipeline;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use segfield_core::hash::mix_seed;
use segfield_core::pseudo::DistanceMetric;
use segfield_core::scene::load_scene;
use segfield_core::synth::{generate_toy_scene, ToySceneSpec};
use segfield_core::trainer::{train_stage1, train_stage2};

use config::{load_config, BackendChoice};
use pipeline::StepStatus;

#[derive(Parser)]
#[command(
    name = "segfield",
    about = "Two-stage multi-view semantic segmentation over an implicit neural field",
    version
)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master RNG seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact output directory (overrides the config file).
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy scene directory from a structured spec.
    GenScene {
        /// Toy-scene spec TOML (defaults to the config's [toy_scene]).
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        /// Scene directory to write (defaults to the config's scene path).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Compute foundation features for a scene and fill the disk cache.
    ExtractFeatures {
        #[arg(long, value_name = "DIR")]
        scene: Option<PathBuf>,
        /// Feature backend.
        #[arg(long, value_enum, default_value_t = BackendChoice::Stub)]
        backend: BackendChoice,
        /// Cache directory (default: SEGFIELD_FEATURE_CACHE or <scene>/features).
        #[arg(long, value_name = "DIR")]
        cache: Option<PathBuf>,
        /// Directory of precomputed SAM encoder grids (sam backend).
        #[arg(long, value_name = "DIR")]
        sam_dir: Option<PathBuf>,
    },
    /// Build class centroids from labeled views and pseudo-label test views.
    PseudoLabel {
        #[arg(long, value_name = "DIR")]
        scene: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BackendChoice::Stub)]
        backend: BackendChoice,
        #[arg(long, value_name = "DIR")]
        cache: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        sam_dir: Option<PathBuf>,
        /// Centroid distance metric: euclidean or cosine.
        #[arg(long, default_value = "euclidean")]
        metric: String,
    },
    /// Train stage 1 (geometry/colour) or stage 2 (semantic transfer).
    Train {
        /// 1 or 2.
        #[arg(long)]
        stage: u8,
        #[arg(long, value_name = "DIR")]
        scene: Option<PathBuf>,
        /// Resume from a checkpoint of the same stage.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Stage-1 checkpoint consumed by stage 2 (default: <output>/stage1.ckpt).
        #[arg(long, value_name = "CKPT")]
        stage1_checkpoint: Option<PathBuf>,
    },
    /// Render a view's colour image (and label map with a stage-2 checkpoint).
    Render {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        scene: Option<PathBuf>,
        /// View index to render.
        #[arg(long)]
        view: usize,
        /// Samples per ray (default: the config's eval sampling).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_enum, default_value_t = BackendChoice::Stub)]
        backend: BackendChoice,
        #[arg(long, value_name = "DIR")]
        sam_dir: Option<PathBuf>,
    },
    /// Score test views against ground truth: per-view and scene mIoU.
    Evaluate {
        /// Stage-2 checkpoint (default: <output>/stage2.ckpt).
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        scene: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the full pipeline, skipping steps whose outputs are current.
    Run,
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    if let Err(err) = dispatch(cli) {
        log::error!("{err:#}");
        std::process::exit(1);
    }
}

fn parse_metric(name: &str) -> Result<DistanceMetric> {
    match name {
        "euclidean" => Ok(DistanceMetric::Euclidean),
        "cosine" => Ok(DistanceMetric::Cosine),
        other => bail!("unknown metric {other}; use euclidean or cosine"),
    }
}

struct Globals {
    config: Option<PathBuf>,
    seed: Option<u64>,
    output: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> Result<()> {
    let globals = Globals {
        config: cli.config,
        seed: cli.seed,
        output: cli.output,
    };
    match cli.command {
        Command::GenScene { spec, out } => {
            let (spec, out_dir) = match (spec, out) {
                (Some(spec_path), out) => {
                    let text = std::fs::read_to_string(&spec_path)
                        .with_context(|| format!("reading spec {}", spec_path.display()))?;
                    let spec: ToySceneSpec = toml::from_str(&text)
                        .with_context(|| format!("parsing spec {}", spec_path.display()))?;
                    let out = out.ok_or_else(|| {
                        anyhow::anyhow!("gen-scene with --spec also needs --out <dir>")
                    })?;
                    (spec, out)
                }
                (None, out) => {
                    let ctx =
                        load_config(globals.config.as_deref(), globals.seed, globals.output.as_deref())?;
                    let spec = ctx.config.toy_scene.clone().ok_or_else(|| {
                        anyhow::anyhow!("config has no [toy_scene] section; pass --spec")
                    })?;
                    (spec, out.unwrap_or(ctx.config.scene))
                }
            };
            let scene = generate_toy_scene(&spec)?;
            segfield_core::scene::save_scene(&scene, &out_dir)?;
            println!(
                "wrote scene with {} views ({} classes) to {}",
                scene.views.len(),
                scene.class_count,
                out_dir.display()
            );
            Ok(())
        }
        Command::ExtractFeatures {
            scene,
            backend,
            cache,
            sam_dir,
        } => {
            let scene_dir = resolve_scene(&globals, scene)?;
            let scene = load_scene(&scene_dir)?;
            let be = ops::make_backend(backend, &scene_dir, sam_dir.as_deref());
            let features =
                ops::extract_scene_features(&scene, &scene_dir, be.as_ref(), cache.as_deref())?;
            println!(
                "extracted {} feature maps (backend {}, D = {})",
                features.len(),
                be.id(),
                be.feature_dim()
            );
            Ok(())
        }
        Command::PseudoLabel {
            scene,
            backend,
            cache,
            sam_dir,
            metric,
        } => {
            let scene_dir = resolve_scene(&globals, scene)?;
            let scene = load_scene(&scene_dir)?;
            let be = ops::make_backend(backend, &scene_dir, sam_dir.as_deref());
            let features =
                ops::extract_scene_features(&scene, &scene_dir, be.as_ref(), cache.as_deref())?;
            ops::pseudo_label_scene(&scene, &scene_dir, &features, parse_metric(&metric)?)?;
            let test_count = scene
                .views
                .iter()
                .filter(|v| v.split == segfield_core::scene::SplitTag::Test)
                .count();
            println!("pseudo-labeled {test_count} test views under {}", scene_dir.display());
            Ok(())
        }
        Command::Train {
            stage,
            scene,
            resume,
            stage1_checkpoint,
        } => {
            let ctx = load_config(globals.config.as_deref(), globals.seed, globals.output.as_deref())?;
            let cfg = &ctx.config;
            let scene_dir = scene.unwrap_or_else(|| cfg.scene.clone());
            let scene = load_scene(&scene_dir)?;
            match stage {
                1 => {
                    let tc = cfg.stage1.to_train_config(1, mix_seed(cfg.seed, "stage1"));
                    let result =
                        train_stage1(&scene, &cfg.field, &tc, resume.as_deref(), &cfg.output)?;
                    println!(
                        "stage 1 finished at iteration {} -> {}",
                        result.final_iteration,
                        result.checkpoint.display()
                    );
                }
                2 => {
                    let be =
                        ops::make_backend(cfg.backend, &scene_dir, cfg.sam_features_dir.as_deref());
                    let features =
                        ops::extract_scene_features(&scene, &scene_dir, be.as_ref(), None)?;
                    let inputs = ops::load_stage2_inputs(&scene, &scene_dir, features)?;
                    let s1 = stage1_checkpoint.unwrap_or_else(|| cfg.output.join("stage1.ckpt"));
                    let tc = cfg.stage2.to_train_config(2, mix_seed(cfg.seed, "stage2"));
                    let result = train_stage2(
                        &scene,
                        &s1,
                        &inputs,
                        &cfg.field,
                        &cfg.fusion,
                        &tc,
                        resume.as_deref(),
                        &cfg.output,
                    )?;
                    println!(
                        "stage 2 finished at iteration {} -> {}",
                        result.final_iteration,
                        result.checkpoint.display()
                    );
                }
                other => bail!("--stage must be 1 or 2, got {other}"),
            }
            Ok(())
        }
        Command::Render {
            checkpoint,
            scene,
            view,
            samples,
            backend,
            sam_dir,
        } => {
            let scene_dir = resolve_scene(&globals, scene)?;
            let scene = load_scene(&scene_dir)?;
            if view >= scene.views.len() {
                bail!("view {view} out of range ({} views)", scene.views.len());
            }
            let model = ops::restore_model(&checkpoint)?;
            let features = if model.fusion.is_some() {
                let be = ops::make_backend(backend, &scene_dir, sam_dir.as_deref());
                Some(ops::extract_scene_features(&scene, &scene_dir, be.as_ref(), None)?)
            } else {
                None
            };
            let samples = samples
                .or_else(|| {
                    globals
                        .config
                        .as_deref()
                        .and_then(|p| config::PipelineConfig::load(p).ok())
                        .map(|c| c.eval_samples())
                })
                .unwrap_or(64);
            let out_dir = globals.output.clone().unwrap_or_else(|| PathBuf::from("."));
            let path = ops::render_one(&scene, view, &model, features.as_ref(), samples, &out_dir)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            scene,
            samples,
        } => {
            let ctx = load_config(globals.config.as_deref(), globals.seed, globals.output.as_deref())?;
            let cfg = &ctx.config;
            let scene_dir = scene.unwrap_or_else(|| cfg.scene.clone());
            let scene = load_scene(&scene_dir)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output.join("stage2.ckpt"));
            let model = ops::restore_model(&ckpt)?;
            let be = ops::make_backend(cfg.backend, &scene_dir, cfg.sam_features_dir.as_deref());
            let features = ops::extract_scene_features(&scene, &scene_dir, be.as_ref(), None)?;
            let summary = ops::evaluate_scene(
                &scene,
                &model,
                &features,
                samples.unwrap_or_else(|| cfg.eval_samples()),
                &cfg.output,
            )?;
            ops::print_eval_table(cfg, &summary);
            println!("wrote {}", summary.csv_path.display());
            Ok(())
        }
        Command::Run => {
            let ctx = load_config(globals.config.as_deref(), globals.seed, globals.output.as_deref())?;
            let report = pipeline::run_pipeline(&ctx.config)?;
            for (step, status) in &report.steps {
                println!(
                    "{step:<18} {}",
                    match status {
                        StepStatus::Ran => "ran",
                        StepStatus::Skipped => "skipped (up to date)",
                    }
                );
            }
            if let Some(miou) = report.scene_miou {
                println!("scene mIoU: {miou:.4}");
            }
            if let Some(csv) = &report.eval_csv {
                println!("evaluation: {}", csv.display());
            }
            Ok(())
        }
    }
}

fn resolve_scene(globals: &Globals, explicit: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(dir) = explicit {
        return Ok(dir);
    }
    let ctx = load_config(globals.config.as_deref(), globals.seed, globals.output.as_deref())?;
    Ok(ctx.config.scene)
}
