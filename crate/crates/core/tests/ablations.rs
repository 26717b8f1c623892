//! Ablation-direction checks on the trained desk-scale checkpoints:
//! regression vs frame-average baseline, diffusion vs regression on large
//! motion, finetune-vs-scratch convergence, and fixed-point sanity.

mod common;

use midframe_core::cascade::CascadeConfig;
use midframe_core::data::load_train_items;
use midframe_core::frame::Frame;
use midframe_core::metrics::{psnr, run_benchmark, BenchmarkSet, Protocol};
use midframe_core::model::{ConditionSet, UNet};
use midframe_core::trainer::Trainer;

#[test]
fn regression_variant_beats_blend_baseline() {
    let fixtures = common::fixtures();
    let model = fixtures.regression.restore_model().unwrap();
    let heldout = common::heldout_triplets();
    let blend = common::blend_baseline_psnr(&heldout);
    let mut total = 0.0;
    for t in &heldout {
        let cond = ConditionSet::base(t.i0.clone(), t.i2.clone()).unwrap();
        let pred = model.regress(&cond).unwrap();
        total += psnr(&pred, &t.i1).unwrap();
    }
    let mean = total / heldout.len() as f64;
    println!("regression {mean:.2} dB vs blend {blend:.2} dB");
    assert!(mean > blend, "regression ({mean:.2}) should beat blend ({blend:.2})");
}

#[test]
fn diffusion_beats_regression_on_large_motion() {
    let fixtures = common::fixtures();
    let diffusion = fixtures.base.restore_model().unwrap();
    let regression = fixtures.regression.restore_model().unwrap();
    // Upper end of the trained displacement range, evaluated at 64x64.
    let split: Vec<_> = common::heldout_triplets()
        .into_iter()
        .filter(|t| t.source_id.contains("x+14") || t.source_id.contains("x+10"))
        .collect();
    assert!(!split.is_empty());

    let cfg = CascadeConfig {
        num_levels: 1,
        patch_size: (64, 64),
        steps_per_level: 4,
        num_samples: 4,
        rng_seed: 21,
    };
    let set = BenchmarkSet::Triplets(split.clone());
    let diff_report = run_benchmark(&diffusion, &set, &cfg, Protocol::Middle).unwrap();

    let mut reg_total = 0.0;
    for t in &split {
        let cond = ConditionSet::base(t.i0.clone(), t.i2.clone()).unwrap();
        let pred = regression.regress(&cond).unwrap();
        reg_total += psnr(&pred, &t.i1).unwrap();
    }
    let reg_mean = reg_total / split.len() as f64;
    println!(
        "large-motion split: diffusion {:.2} dB vs regression {reg_mean:.2} dB",
        diff_report.mean_psnr
    );
    assert!(
        diff_report.mean_psnr > reg_mean,
        "diffusion ({:.2}) should beat regression ({reg_mean:.2}) under the same budget",
        diff_report.mean_psnr
    );
}

#[test]
fn cascade_finetune_converges_faster_than_scratch() {
    let fixtures = common::fixtures();
    let items = load_train_items(&fixtures.train_root).unwrap();
    let probe_steps = 200u64;

    let run = |model: UNet<f32>, seed: u64| -> f64 {
        let mut cfg = common::cascade_train_config(0.5, probe_steps, seed);
        cfg.warmup_steps = 20;
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let mut tail = Vec::new();
        for step in 0..probe_steps {
            let batch = trainer.sample_batch(&items).unwrap();
            let stats = trainer.train_step(&batch).unwrap();
            if step >= probe_steps - 50 {
                tail.push(stats.loss);
            }
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    };

    let from_base = run(fixtures.base.restore_model().unwrap(), 7);
    let from_scratch =
        run(UNet::build(common::model_config(), common::MODEL_SEED + 1).unwrap(), 7);
    println!("cascade tail loss: from base {from_base:.4}, from scratch {from_scratch:.4}");
    assert!(
        from_base < from_scratch,
        "finetuning from the base checkpoint ({from_base:.4}) should sit below scratch ({from_scratch:.4})"
    );
}

#[test]
fn recursive_interpolation_of_identical_inputs_is_a_fixed_point() {
    let fixtures = common::fixtures();
    let model = fixtures.cascade.restore_model().unwrap();
    let c = Frame::constant(64, 64, 0.2);
    let cfg = CascadeConfig {
        num_levels: 1,
        patch_size: (64, 64),
        steps_per_level: 4,
        num_samples: 4,
        rng_seed: 31,
    };
    let frames =
        midframe_core::cascade::interpolate_recursive(&model, &c, &c, 7, &cfg).unwrap();
    assert_eq!(frames.len(), 7);
    for (k, f) in frames.iter().enumerate() {
        let p = psnr(f, &c).unwrap();
        assert!(p > 40.0, "frame {k}: identical inputs should reproduce the constant ({p:.1} dB)");
    }
}
