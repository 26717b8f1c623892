//! Parallel vs sequential execution of the data-parallel kernels.
//!
//! Built with the `parallel` feature; the sequential side is measured by
//! forcing the always-compiled fallback path at runtime, so both modes run
//! the same code with the same work decomposition.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use midframe_core::cascade::{cascade_level, CascadeConfig};
use midframe_core::exec;
use midframe_core::frame::Frame;
use midframe_core::metrics::ssim;
use midframe_core::model::{default_attention_levels, ConditionSet, ModelConfig, UNet};

fn bench_frame(h: usize, w: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frame::standard_normal(h, w, &mut rng).scale(0.5).clamp(-1.0, 1.0)
}

fn bench_model() -> UNet<f32> {
    let cfg = ModelConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        blocks_per_level: 1,
        attention_levels: default_attention_levels(2),
        use_attention: false,
        time_embed_dim: 16,
        input_channels: 12,
        output_channels: 3,
    };
    UNet::build(cfg, 7).unwrap()
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_denoise(c: &mut Criterion) {
    let model = bench_model();
    let z = bench_frame(96, 96, 1);
    let cond = ConditionSet::new(
        bench_frame(96, 96, 2),
        bench_frame(96, 96, 3),
        bench_frame(96, 96, 4),
    )
    .unwrap();
    let mut group = c.benchmark_group("denoise_96x96");
    for (name, force_seq) in modes() {
        group.bench_function(name, |b| {
            exec::force_sequential(force_seq);
            b.iter(|| {
                use midframe_core::model::Denoiser;
                model.denoise(&z, 0.5, &cond).unwrap()
            });
        });
    }
    exec::force_sequential(false);
    group.finish();
}

fn bench_cascade_level(c: &mut Criterion) {
    let model = bench_model();
    let i0 = bench_frame(96, 96, 11);
    let i2 = bench_frame(96, 96, 12);
    let c_low = bench_frame(96, 96, 13);
    let cfg = CascadeConfig {
        num_levels: 1,
        patch_size: (48, 48),
        steps_per_level: 2,
        num_samples: 1,
        rng_seed: 5,
    };
    let mut group = c.benchmark_group("cascade_level_96x96_patch48");
    group.sample_size(10);
    for (name, force_seq) in modes() {
        group.bench_function(name, |b| {
            exec::force_sequential(force_seq);
            b.iter(|| cascade_level(&model, &i0, &i2, &c_low, &cfg, cfg.rng_seed).unwrap());
        });
    }
    exec::force_sequential(false);
    group.finish();
}

fn bench_ssim(c: &mut Criterion) {
    let a = bench_frame(256, 256, 21);
    let b = bench_frame(256, 256, 22);
    let mut group = c.benchmark_group("ssim_256x256");
    group.sample_size(10);
    for (name, force_seq) in modes() {
        group.bench_function(name, |bch| {
            exec::force_sequential(force_seq);
            bch.iter(|| ssim(&a, &b).unwrap());
        });
    }
    exec::force_sequential(false);
    group.finish();
}

criterion_group!(benches, bench_denoise, bench_cascade_level, bench_ssim);
criterion_main!(benches);
