use super::*;
use crate::data::{generate_synthetic, SyntheticSpec, TextureKind};
use crate::model::default_attention_levels;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        blocks_per_level: 1,
        attention_levels: default_attention_levels(2),
        use_attention: true,
        time_embed_dim: 16,
        input_channels: 12,
        output_channels: 3,
    }
}

fn tiny_items(count: usize, canvas: usize, dx: i64) -> Vec<TrainItem> {
    let spec = SyntheticSpec {
        canvas: (canvas, canvas),
        texture: TextureKind::NoiseTile,
        displacement: (0, dx),
        count,
    };
    generate_synthetic(&spec, 99)
        .unwrap()
        .into_iter()
        .map(|triplet| TrainItem { triplet, lowres: None })
        .collect()
}

fn tiny_train_config(total: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(TrainMode::Base);
    cfg.batch_size = 2;
    cfg.lr = 2e-3;
    cfg.warmup_steps = 2;
    cfg.total_steps = total;
    cfg.seed = 5;
    cfg.augment = AugmentConfig::identity((16, 16));
    cfg
}

#[test]
fn warmup_schedule_is_linear_then_constant() {
    assert_eq!(warmup_lr(1e-4, 0, 100), 0.0);
    assert_eq!(warmup_lr(1e-4, 50, 100), 0.5e-4);
    assert_eq!(warmup_lr(1e-4, 100, 100), 1e-4);
    assert_eq!(warmup_lr(1e-4, 10_000, 100), 1e-4);
    assert_eq!(warmup_lr(1e-4, 3, 0), 1e-4);
}

#[test]
fn dropout_rate_is_realized() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for p in [0.0, 0.25, 0.5, 1.0] {
        let hits = (0..10_000).filter(|_| draw_condition_dropout(&mut rng, p)).count();
        let rate = hits as f64 / 10_000.0;
        assert!((rate - p).abs() <= 0.02, "p={p}: realized {rate}");
    }
}

#[test]
fn initial_loss_is_order_one() {
    let model = UNet::<f32>::build(tiny_model_config(), 3).unwrap();
    let items = tiny_items(4, 16, 4);
    let mut trainer = Trainer::new(model, tiny_train_config(10)).unwrap();
    let batch = trainer.sample_batch(&items).unwrap();
    let stats = trainer.train_step(&batch).unwrap();
    assert!(stats.loss.is_finite());
    // Zero-initialized output head => loss is E|v| under the schedule.
    assert!(stats.loss > 0.05 && stats.loss < 5.0, "loss {}", stats.loss);
}

#[test]
fn overfit_smoke_halves_the_loss() {
    let model = UNet::<f32>::build(tiny_model_config(), 3).unwrap();
    let items = tiny_items(10, 16, 4);
    let mut cfg = tiny_train_config(500);
    cfg.batch_size = 2;
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut early = Vec::new();
    let mut late = Vec::new();
    for step in 0..500 {
        let batch = trainer.sample_batch(&items).unwrap();
        let stats = trainer.train_step(&batch).unwrap();
        if step < 20 {
            early.push(stats.loss);
        }
        if step >= 480 {
            late.push(stats.loss);
        }
    }
    let early_mean: f64 = early.iter().sum::<f64>() / early.len() as f64;
    let late_mean: f64 = late.iter().sum::<f64>() / late.len() as f64;
    assert!(
        late_mean <= 0.5 * early_mean,
        "loss did not halve: early {early_mean:.4} late {late_mean:.4}"
    );
}

#[test]
fn cascade_mode_requires_lowres() {
    let model = UNet::<f32>::build(tiny_model_config(), 3).unwrap();
    let mut cfg = tiny_train_config(10);
    cfg.mode = TrainMode::Cascade;
    let items = tiny_items(2, 16, 4);
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let batch = trainer.sample_batch(&items).unwrap();
    assert!(trainer.train_step(&batch).is_err());
}

#[test]
fn full_dropout_matches_base_distribution() {
    // dropout_p = 1: every cascade item is conditioned on zeros.
    let model = UNet::<f32>::build(tiny_model_config(), 3).unwrap();
    let mut cfg = tiny_train_config(10);
    cfg.mode = TrainMode::Cascade;
    cfg.dropout_p = 1.0;
    let mut items = tiny_items(2, 16, 4);
    for item in &mut items {
        item.lowres = Some(crate::cascade::downsample(&item.triplet.i1, 2).unwrap());
    }
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let batch = trainer.sample_batch(&items).unwrap();
    let stats = trainer.train_step(&batch).unwrap();
    assert_eq!(stats.dropped_conditions, stats.batch_size);
}

#[test]
fn resume_reproduces_uninterrupted_run_bitwise() {
    let items = tiny_items(6, 16, 4);
    let cfg = tiny_train_config(50);

    let model = UNet::<f32>::build(tiny_model_config(), 3).unwrap();
    let mut straight = Trainer::new(model, cfg.clone()).unwrap();
    let final_a = straight.fit(&items, &[], None).unwrap();

    let model = UNet::<f32>::build(tiny_model_config(), 3).unwrap();
    let mut cfg_half = cfg.clone();
    cfg_half.total_steps = 25;
    let mut first_half = Trainer::new(model, cfg_half).unwrap();
    let mid = first_half.fit(&items, &[], None).unwrap();

    let mut resumed = Trainer::from_checkpoint(&mid, cfg).unwrap();
    let final_b = resumed.fit(&items, &[], None).unwrap();

    assert_eq!(final_a.train_step, final_b.train_step);
    for ((na, a), (nb, b)) in final_a.params.iter().zip(&final_b.params) {
        assert_eq!(na, nb);
        assert_eq!(a, b, "parameter {na} diverged after resume");
    }
}

#[test]
fn zero_total_steps_returns_initial_parameters() {
    let model = UNet::<f32>::build(tiny_model_config(), 3).unwrap();
    let before = Checkpoint::from_model(&model, 0, 0, 0);
    let mut cfg = tiny_train_config(10);
    cfg.total_steps = 0;
    cfg.warmup_steps = 0;
    let items = tiny_items(2, 16, 4);
    let after = fit(model, &items, &[], cfg, None).unwrap();
    for ((na, a), (_, b)) in before.params.iter().zip(&after.params) {
        assert_eq!(a, b, "parameter {na} changed with zero steps");
    }
}

#[test]
fn nan_loss_aborts_with_diagnostic() {
    let mut model = UNet::<f32>::build(tiny_model_config(), 3).unwrap();
    model.visit_params_mut(&mut |name, mut v, _| {
        if name == "stem.w" {
            v.as_slice_mut().unwrap()[0] = f32::NAN;
        }
    });
    let items = tiny_items(2, 16, 4);
    let mut trainer = Trainer::new(model, tiny_train_config(10)).unwrap();
    let batch = trainer.sample_batch(&items).unwrap();
    let err = trainer.train_step(&batch).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}

#[test]
fn gradient_check_passes_on_tiny_config() {
    let report = gradient_check(&tiny_model_config(), 11, 10).unwrap();
    assert!(report.checked >= 10);
    assert!(report.max_rel_err < 1e-3, "max rel err {:.3e}", report.max_rel_err);
}

use rand_chacha::ChaCha8Rng;

#[test]
#[ignore = "manual profiling helper"]
fn profile_training_step() {
    use std::time::Instant;
    for (base, levels, size, batch) in
        [(12usize, 3usize, 64usize, 4usize), (16, 3, 64, 4), (12, 3, 48, 4), (16, 3, 48, 4)]
    {
        let cfg = ModelConfig {
            base_channels: base,
            channel_multipliers: (0..levels).map(|i| 1 << i).collect(),
            blocks_per_level: 2,
            attention_levels: default_attention_levels(levels),
            use_attention: true,
            time_embed_dim: 64,
            input_channels: 12,
            output_channels: 3,
        };
        let model = UNet::<f32>::build(cfg.clone(), 3).unwrap();
        println!("base {base} levels {levels} size {size}: {} params", model.param_count());
        let items = tiny_items(4, size, 4);
        let mut tcfg = tiny_train_config(1000);
        tcfg.batch_size = batch;
        tcfg.augment = AugmentConfig::identity((size, size));
        let mut trainer = Trainer::new(model, tcfg).unwrap();
        let batch_items = trainer.sample_batch(&items).unwrap();
        trainer.train_step(&batch_items).unwrap(); // warm up
        let start = Instant::now();
        let reps = 3;
        for _ in 0..reps {
            let batch_items = trainer.sample_batch(&items).unwrap();
            trainer.train_step(&batch_items).unwrap();
        }
        println!("  {:.3} s/step", start.elapsed().as_secs_f64() / reps as f64);

        // Inference timing (denoise one frame)
        let z = items[0].triplet.i1.clone();
        let cond = ConditionSet::base(items[0].triplet.i0.clone(), items[0].triplet.i2.clone()).unwrap();
        use crate::model::Denoiser;
        let start = Instant::now();
        for _ in 0..5 {
            trainer.model.denoise(&z, 0.5, &cond).unwrap();
        }
        println!("  {:.4} s/denoise at {size}x{size}", start.elapsed().as_secs_f64() / 5.0);
    }
}
