//! Command-line surface for the frame-interpolation toolkit: synthetic data
//! generation, training, offline precompute, interpolation, evaluation, and
//! parameter sweeps.
//!
//! Exit codes: 0 success, 2 usage or I/O error, 3 numeric failure.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use midframe_core::cascade::{interpolate, interpolate_recursive, CascadeConfig};
use midframe_core::data::{
    generate_synthetic_clips, load_clips, load_train_items, load_triplets, precompute_lowres,
    save_clip_frames, SyntheticSpec, TextureKind,
};
use midframe_core::metrics::{
    psnr, run_benchmark, sweep, sweep_table, BenchmarkSet, Protocol, SweepAxis,
};
use midframe_core::model::{Checkpoint, UNet};
use midframe_core::trainer::Trainer;
use midframe_core::{Error, Frame};

use config::{parse_size, RunConfig};

#[derive(Parser)]
#[command(
    name = "midframe",
    about = "Patch-based cascaded pixel diffusion for video frame interpolation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clips with exact ground-truth motion.
    Synth(SynthArgs),
    /// Train a model (base, cascade, or regression mode).
    Train(TrainArgs),
    /// Precompute half-resolution intermediates for cascade training.
    Precompute(PrecomputeArgs),
    /// Interpolate the middle frame (or 7 frames) between two images.
    Interpolate(InterpolateArgs),
    /// Evaluate a checkpoint over a dataset.
    Eval(EvalArgs),
    /// Run a benchmark sweep over one inference knob.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory (one subdirectory per clip).
    #[arg(long)]
    out: PathBuf,
    /// Texture family: checker | stripes | noise-tile | sprite.
    #[arg(long, default_value = "checker")]
    texture: String,
    /// Vertical displacement in pixels (must be even).
    #[arg(long, default_value_t = 0)]
    dy: i64,
    /// Horizontal displacement in pixels (must be even).
    #[arg(long, default_value_t = 8)]
    dx: i64,
    /// Canvas size as HxW.
    #[arg(long, default_value = "64x64")]
    canvas: String,
    /// Number of clips.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Frames per clip (3 for triplets, 9 for the recursion protocol).
    #[arg(long, default_value_t = 3)]
    clip_len: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file (see README for keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training mode: base | cascade | regression (overrides the file).
    #[arg(long)]
    mode: Option<String>,
    /// Initialize from an existing checkpoint (e.g. cascade from base).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset root.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Override total training steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Override learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override rng seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override conditioning dropout probability.
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct PrecomputeArgs {
    /// Dataset root holding triplet clips.
    #[arg(long)]
    data: PathBuf,
    /// Trained base checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sampling steps for the base prediction.
    #[arg(long, default_value_t = 4)]
    steps: usize,
    /// Averaged samples for the base prediction.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Sampling seed.
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct InterpolateArgs {
    /// First input frame.
    #[arg(long)]
    in0: PathBuf,
    /// Second input frame.
    #[arg(long)]
    in1: PathBuf,
    /// Output image path (with --frames 7: numbered suffixes).
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pyramid levels.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Patch size as HxW.
    #[arg(long, default_value = "512x768")]
    patch: String,
    /// Sampling steps per level.
    #[arg(long, default_value_t = 4)]
    steps: usize,
    /// Averaged samples per level.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Sampling seed.
    #[arg(long)]
    seed: u64,
    /// Number of frames to synthesize (1 or 7).
    #[arg(long, default_value_t = 1)]
    frames: usize,
    /// Ground-truth middle frame; when given, PSNR is printed.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset root (triplets for middle, 9-frame clips for recursion7).
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Protocol: middle | recursion7.
    #[arg(long, default_value = "middle")]
    protocol: String,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value = "512x768")]
    patch: String,
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Sampling seed.
    #[arg(long)]
    seed: u64,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Sweep axis: steps | patch | levels | samples.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values (e.g. `1,2,4,8` or `512x768,256x384`).
    #[arg(long)]
    values: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numeric = err
                .downcast_ref::<Error>()
                .map(|e| matches!(e, Error::Numeric(_)))
                .unwrap_or(false);
            if numeric {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Precompute(args) => cmd_precompute(args),
        Command::Interpolate(args) => cmd_interpolate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let texture = TextureKind::parse(&args.texture)?;
    let canvas = parse_size(&args.canvas)?;
    let spec = SyntheticSpec {
        canvas,
        texture,
        displacement: (args.dy, args.dx),
        count: args.count,
    };
    let clips = generate_synthetic_clips(&spec, args.clip_len, args.seed)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output dir {}", args.out.display()))?;
    for clip in &clips {
        let refs: Vec<&Frame> = clip.frames.iter().collect();
        save_clip_frames(&args.out.join(&clip.source_id), &refs)?;
    }
    println!(
        "wrote {} clips ({} frames each) to {}",
        clips.len(),
        args.clip_len,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run_cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(mode) = &args.mode {
        run_cfg.set("mode", mode.clone());
    }
    if let Some(steps) = args.steps {
        run_cfg.set("total_steps", steps.to_string());
    }
    if let Some(lr) = args.lr {
        run_cfg.set("lr", lr.to_string());
    }
    if let Some(batch) = args.batch_size {
        run_cfg.set("batch_size", batch.to_string());
    }
    if let Some(seed) = args.seed {
        run_cfg.set("seed", seed.to_string());
    }
    if let Some(dropout) = args.dropout {
        run_cfg.set("dropout_p", dropout.to_string());
    }
    let train_cfg = run_cfg.train_config()?;

    let items = load_train_items(&args.data)?;
    if items.is_empty() {
        bail!("no training clips under {}", args.data.display());
    }
    let val_items = match &args.val {
        Some(root) => load_train_items(root)?,
        None => Vec::new(),
    };

    let mut trainer = match &args.init {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            log::info!(
                "initializing from {} (step {}, {} tensors)",
                ckpt_path.display(),
                ckpt.train_step,
                ckpt.params.len()
            );
            let mut t = Trainer::from_checkpoint(&ckpt, train_cfg)?;
            // A fresh run from pre-trained weights, not a resume.
            t.step = 0;
            t.adam = midframe_core::nn::adam::Adam::new(Default::default());
            t
        }
        None => {
            let model = UNet::build(run_cfg.model_config()?, run_cfg.train_config()?.seed)?;
            Trainer::new(model, train_cfg)?
        }
    };

    log::info!(
        "training mode {} for {} steps on {} clips ({} parameters)",
        trainer.cfg.mode.name(),
        trainer.cfg.total_steps,
        items.len(),
        trainer.model.param_count()
    );
    let ckpt = trainer.fit(&items, &val_items, Some(&args.out))?;
    println!(
        "finished at step {}; checkpoint {}",
        ckpt.train_step,
        args.out.join("final.ckpt").display()
    );
    Ok(())
}

fn cmd_precompute(args: PrecomputeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.restore_model()?;
    let cfg = CascadeConfig {
        num_levels: 1,
        patch_size: (
            model.cfg.downsample_factor().max(8),
            model.cfg.downsample_factor().max(8),
        ),
        steps_per_level: args.steps,
        num_samples: args.samples,
        rng_seed: args.seed,
    };
    let manifest = precompute_lowres(&model, &args.data, &cfg)?;
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn load_model(path: &PathBuf) -> Result<UNet<f32>> {
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ckpt.restore_model()?)
}

fn cmd_interpolate(args: InterpolateArgs) -> Result<()> {
    let i0 = Frame::load_png(&args.in0)?;
    let i1 = Frame::load_png(&args.in1)?;
    if i0.hw() != i1.hw() {
        bail!("input sizes differ: {:?} vs {:?}", i0.hw(), i1.hw());
    }
    let model = load_model(&args.checkpoint)?;
    let cfg = CascadeConfig {
        num_levels: args.levels,
        patch_size: parse_size(&args.patch)?,
        steps_per_level: args.steps,
        num_samples: args.samples,
        rng_seed: args.seed,
    };
    match args.frames {
        1 => {
            let pred = interpolate(&model, &i0, &i1, &cfg)?;
            pred.save_png(&args.out)?;
            println!("wrote {}", args.out.display());
            if let Some(gt_path) = &args.gt {
                let gt = Frame::load_png(gt_path)?;
                println!("psnr vs ground truth: {:.3} dB", psnr(&pred, &gt)?);
            }
        }
        n => {
            let preds = interpolate_recursive(&model, &i0, &i1, n, &cfg)?;
            let stem = args.out.file_stem().unwrap_or_default().to_string_lossy();
            let ext = args.out.extension().unwrap_or_default().to_string_lossy();
            for (k, pred) in preds.iter().enumerate() {
                let path = args
                    .out
                    .with_file_name(format!("{stem}_{:02}.{ext}", k + 1));
                pred.save_png(&path)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn parse_protocol(raw: &str) -> Result<Protocol> {
    match raw {
        "middle" => Ok(Protocol::Middle),
        "recursion7" => Ok(Protocol::Recursion7),
        other => bail!("unknown protocol '{other}' (expected middle|recursion7)"),
    }
}

fn load_benchmark_set(root: &PathBuf, protocol: Protocol) -> Result<BenchmarkSet> {
    let set = match protocol {
        Protocol::Middle => BenchmarkSet::Triplets(load_triplets(root)?.collect()),
        Protocol::Recursion7 => BenchmarkSet::Clips(load_clips(root, 9)?),
    };
    if set.is_empty() {
        bail!("no usable clips under {}", root.display());
    }
    Ok(set)
}

fn eval_cascade_config(args: &EvalArgs) -> Result<CascadeConfig> {
    Ok(CascadeConfig {
        num_levels: args.levels,
        patch_size: parse_size(&args.patch)?,
        steps_per_level: args.steps,
        num_samples: args.samples,
        rng_seed: args.seed,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let protocol = parse_protocol(&args.protocol)?;
    let model = load_model(&args.checkpoint)?;
    let set = load_benchmark_set(&args.data, protocol)?;
    let cfg = eval_cascade_config(&args)?;
    let report = run_benchmark(&model, &set, &cfg, protocol)?;
    print!("{}", report.table());
    let (table, records) = report.write(&args.out)?;
    println!("reports: {} / {}", table.display(), records.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let protocol = parse_protocol(&args.eval.protocol)?;
    let model = load_model(&args.eval.checkpoint)?;
    let set = load_benchmark_set(&args.eval.data, protocol)?;
    let cfg = eval_cascade_config(&args.eval)?;
    let axis = match args.axis.as_str() {
        "steps" => SweepAxis::Steps(parse_list(&args.values)?),
        "samples" => SweepAxis::Samples(parse_list(&args.values)?),
        "levels" => SweepAxis::Levels(parse_list(&args.values)?),
        "patch" => SweepAxis::PatchSize(
            args.values.split(',').map(|v| parse_size(v.trim())).collect::<Result<Vec<_>>>()?,
        ),
        other => bail!("unknown sweep axis '{other}' (expected steps|patch|levels|samples)"),
    };
    let rows = sweep(&model, &set, &cfg, &axis, protocol)?;
    print!("{}", sweep_table(&rows));
    std::fs::create_dir_all(&args.eval.out)?;
    for row in &rows {
        row.report.write(&args.eval.out)?;
    }
    let summary = args.eval.out.join("sweep_summary.txt");
    std::fs::write(&summary, sweep_table(&rows))?;
    println!("summary: {}", summary.display());
    Ok(())
}

fn parse_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| anyhow::anyhow!("bad value {p:?}: {e}")))
        .collect()
}
