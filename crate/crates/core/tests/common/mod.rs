//! Shared fixtures for the integration and acceptance suites: synthetic
//! datasets and desk-scale trained checkpoints, cached on disk under the
//! cargo target tmpdir so repeated test runs skip training.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use midframe_core::cascade::CascadeConfig;
use midframe_core::data::{
    generate_synthetic, load_train_items, precompute_lowres, save_triplet, AugmentConfig,
    SyntheticSpec, TextureKind, Triplet,
};
use midframe_core::frame::Frame;
use midframe_core::metrics::psnr;
use midframe_core::model::{default_attention_levels, Checkpoint, ModelConfig, UNet};
use midframe_core::trainer::{TrainConfig, TrainMode, Trainer};

/// Bump to invalidate cached checkpoints after fixture changes.
pub const FIXTURE_VERSION: &str = "v3";

pub const MODEL_SEED: u64 = 11;
pub const BASE_STEPS: u64 = 9000;
pub const CASCADE_STEPS: u64 = 1200;

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("fixtures_{FIXTURE_VERSION}"))
}

/// Desk-scale model: 3 levels, 12 base channels, attention at the two
/// bottom levels (~405k parameters).
pub fn model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 16,
        channel_multipliers: vec![1, 2, 4],
        blocks_per_level: 2,
        attention_levels: default_attention_levels(3),
        use_attention: true,
        time_embed_dim: 64,
        input_channels: 12,
        output_channels: 3,
    }
}

const TEXTURES: [TextureKind; 4] =
    [TextureKind::Checker, TextureKind::Stripes, TextureKind::NoiseTile, TextureKind::Sprite];

/// Training displacements: 4-16 px at 64x64, both axes and one diagonal.
const TRAIN_DISPLACEMENTS: [(i64, i64); 10] = [
    (0, 4),
    (0, 8),
    (0, 12),
    (0, 16),
    (4, 0),
    (8, 0),
    (12, 0),
    (16, 0),
    (6, 6),
    (10, 12),
];

/// Clips per (texture, displacement) cell; synthetic data is free, and a
/// large pool is what keeps the model from memorizing clips.
pub const TRAIN_CLIPS_PER_CELL: usize = 30;

pub fn training_triplets(seed: u64) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (ti, texture) in TEXTURES.iter().enumerate() {
        for (di, &displacement) in TRAIN_DISPLACEMENTS.iter().enumerate() {
            let spec = SyntheticSpec {
                canvas: (64, 64),
                texture: *texture,
                displacement,
                count: TRAIN_CLIPS_PER_CELL,
            };
            let set_seed = seed.wrapping_add((ti * 100 + di) as u64);
            out.extend(generate_synthetic(&spec, set_seed).unwrap());
        }
    }
    // Flat clips across the intensity range anchor flat-region behavior
    // (the seam check feeds constant frames through the full cascade).
    for k in 0..16 {
        let v = -0.75 + k as f32 * 0.1;
        let c = Frame::constant(64, 64, v);
        out.push(Triplet::new(c.clone(), c.clone(), c, format!("flat_{k:02}")).unwrap());
    }
    out
}

/// Held-out split: same generator family, disjoint seed, one clip per
/// (texture, displacement) pair at 64x64.
pub fn heldout_triplets() -> Vec<Triplet> {
    let mut out = Vec::new();
    for texture in TEXTURES {
        for displacement in [(0i64, 6i64), (0, 10), (8, 0), (14, 0)] {
            // Over-generate and keep the first clip with real motion;
            // periodic textures can be displacement-invariant (e.g. stripes
            // along their constant axis), which would make the blend
            // baseline trivially perfect.
            let spec = SyntheticSpec { canvas: (64, 64), texture, displacement, count: 6 };
            let seed = 7_700 + texture.name().len() as u64 * 31 + displacement.1 as u64
                + displacement.0 as u64 * 3;
            let clip = generate_synthetic(&spec, seed)
                .unwrap()
                .into_iter()
                .find(|t| t.i0.max_abs_diff(&t.i2) > 0.5)
                .expect("a moving clip exists");
            out.push(clip);
        }
    }
    out
}

/// Large-motion split at 128x128: displacement greater than a quarter of the
/// 64-px patch width, i.e. > 16 px at full resolution.
pub fn large_displacement_triplets() -> Vec<Triplet> {
    let mut out = Vec::new();
    for texture in TEXTURES {
        for displacement in [(0i64, 24i64), (28, 0)] {
            let spec = SyntheticSpec { canvas: (128, 128), texture, displacement, count: 1 };
            let seed = 9_100 + texture.name().len() as u64 * 17 + displacement.1 as u64;
            out.extend(generate_synthetic(&spec, seed).unwrap());
        }
    }
    out
}

/// Mean PSNR of the frame-average baseline `(I0 + I2) / 2`.
pub fn blend_baseline_psnr(triplets: &[Triplet]) -> f64 {
    let total: f64 = triplets
        .iter()
        .map(|t| {
            let blend = t.i0.affine_combine(0.5, &t.i2, 0.5).unwrap();
            psnr(&blend, &t.i1).unwrap()
        })
        .sum();
    total / triplets.len() as f64
}

pub struct Fixtures {
    pub base: Checkpoint,
    pub cascade: Checkpoint,
    pub no_dropout: Checkpoint,
    pub regression: Checkpoint,
    pub train_root: PathBuf,
}

static FIXTURES: OnceLock<Fixtures> = OnceLock::new();

pub fn fixtures() -> &'static Fixtures {
    FIXTURES.get_or_init(build_fixtures)
}

fn base_train_config(mode: TrainMode, steps: u64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(mode);
    cfg.batch_size = 3;
    cfg.lr = 3e-4;
    cfg.warmup_steps = 100;
    cfg.total_steps = steps;
    cfg.seed = seed;
    cfg.augment = AugmentConfig {
        crop_size: (40, 40),
        flip_h: 0.5,
        flip_v: 0.5,
        flip_t: 0.5,
        multires_crop: false,
    };
    cfg
}

pub fn cascade_train_config(dropout_p: f64, steps: u64, seed: u64) -> TrainConfig {
    let mut cfg = base_train_config(TrainMode::Cascade, steps, seed);
    cfg.lr = 2e-4;
    cfg.warmup_steps = 50;
    cfg.dropout_p = dropout_p;
    cfg
}

/// Deterministic inference settings for the offline lowres precompute.
pub fn precompute_config() -> CascadeConfig {
    CascadeConfig {
        num_levels: 1,
        patch_size: (32, 32),
        steps_per_level: 4,
        num_samples: 2,
        rng_seed: 4242,
    }
}

fn build_fixtures() -> Fixtures {
    let dir = cache_dir();
    std::fs::create_dir_all(&dir).expect("create fixture cache dir");
    let build_start = std::time::Instant::now();
    let mut trained_any = false;
    let train_root = dir.join("train_data");

    if !train_root.join(".complete").exists() {
        if train_root.exists() {
            std::fs::remove_dir_all(&train_root).unwrap();
        }
        std::fs::create_dir_all(&train_root).unwrap();
        for t in training_triplets(41) {
            save_triplet(&train_root.join(&t.source_id), &t).unwrap();
        }
        std::fs::write(train_root.join(".complete"), b"ok").unwrap();
    }

    // Base model.
    let base_path = dir.join("base.ckpt");
    let base = if base_path.exists() {
        Checkpoint::load(&base_path).unwrap()
    } else {
        trained_any = true;
        eprintln!("[fixtures] training base model ({BASE_STEPS} steps)...");
        let items = load_train_items(&train_root).unwrap();
        let model = UNet::build(model_config(), MODEL_SEED).unwrap();
        let mut trainer =
            Trainer::new(model, base_train_config(TrainMode::Base, BASE_STEPS, 1)).unwrap();
        let ckpt = trainer.fit(&items, &[], None).unwrap();
        ckpt.save(&base_path).unwrap();
        ckpt
    };

    // Offline lowres intermediates from the trained base model.
    let lowres_marker = train_root.join(".lowres_complete");
    if !lowres_marker.exists() {
        eprintln!("[fixtures] precomputing lowres intermediates...");
        let base_model = base.restore_model().unwrap();
        precompute_lowres(&base_model, &train_root, &precompute_config()).unwrap();
        std::fs::write(&lowres_marker, b"ok").unwrap();
    }

    // Shared cascade model: finetuned from the base checkpoint with 50%
    // conditioning dropout.
    let cascade_path = dir.join("cascade.ckpt");
    let cascade = if cascade_path.exists() {
        Checkpoint::load(&cascade_path).unwrap()
    } else {
        trained_any = true;
        eprintln!("[fixtures] training cascade model ({CASCADE_STEPS} steps)...");
        let items = load_train_items(&train_root).unwrap();
        let model = base.restore_model().unwrap();
        let mut trainer =
            Trainer::new(model, cascade_train_config(0.5, CASCADE_STEPS, 2)).unwrap();
        let ckpt = trainer.fit(&items, &[], None).unwrap();
        ckpt.save(&cascade_path).unwrap();
        ckpt
    };

    // Ablation: no conditioning dropout.
    let nd_path = dir.join("no_dropout.ckpt");
    let no_dropout = if nd_path.exists() {
        Checkpoint::load(&nd_path).unwrap()
    } else {
        trained_any = true;
        eprintln!("[fixtures] training no-dropout ablation ({CASCADE_STEPS} steps)...");
        let items = load_train_items(&train_root).unwrap();
        let model = base.restore_model().unwrap();
        let mut trainer =
            Trainer::new(model, cascade_train_config(0.0, CASCADE_STEPS, 2)).unwrap();
        let ckpt = trainer.fit(&items, &[], None).unwrap();
        ckpt.save(&nd_path).unwrap();
        ckpt
    };

    // Regression ablation under the same budget as the base model.
    let reg_path = dir.join("regression.ckpt");
    let regression = if reg_path.exists() {
        Checkpoint::load(&reg_path).unwrap()
    } else {
        trained_any = true;
        eprintln!("[fixtures] training regression ablation ({BASE_STEPS} steps)...");
        let items = load_train_items(&train_root).unwrap();
        let model = UNet::build(model_config(), MODEL_SEED).unwrap();
        let mut trainer =
            Trainer::new(model, base_train_config(TrainMode::Regression, BASE_STEPS, 1)).unwrap();
        let ckpt = trainer.fit(&items, &[], None).unwrap();
        ckpt.save(&reg_path).unwrap();
        ckpt
    };

    if trained_any {
        let secs = build_start.elapsed().as_secs_f64();
        std::fs::write(dir.join("train_time_s.txt"), format!("{secs:.1}")).unwrap();
        eprintln!("[fixtures] training finished in {secs:.0}s");
    }

    Fixtures { base, cascade, no_dropout, regression, train_root }
}

/// Wall-clock seconds the fixture training took when it last ran.
pub fn recorded_training_seconds() -> Option<f64> {
    std::fs::read_to_string(cache_dir().join("train_time_s.txt"))
        .ok()
        .and_then(|s| s.trim().parse().ok())
}
