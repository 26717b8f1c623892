//! Fidelity metrics and benchmark protocol runners.
//!
//! PSNR and SSIM are computed on 8-bit-quantized RGB values (the common
//! protocol of the public interpolation benchmarks): PSNR with `MAX = 255`
//! capped at 99 dB, SSIM single-scale with an 11x11 Gaussian window
//! (sigma = 1.5, K1 = 0.01, K2 = 0.03) averaged over channels.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cascade::{interpolate, interpolate_recursive, plan_grid, CascadeConfig};
pub use crate::cascade::{measure_activation_peak, ActivationProbe, InstrumentedDenoiser};
use crate::data::{Clip, Triplet};
use crate::error::{Error, Result};
use crate::exec;
use crate::frame::Frame;
use crate::model::Denoiser;
use crate::schedule::derive_seed;

pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB on 8-bit-quantized values.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let qa = a.quantize_u8();
    let qb = b.quantize_u8();
    let n = qa.len() as f64;
    let sse: f64 = qa
        .iter()
        .zip(qb.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = sse / n;
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let mut w = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (y, row) in w.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            *v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    w
}

/// Single-scale SSIM, mean over valid 11x11 windows and channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w) = a.hw();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let qa = a.quantize_u8();
    let qb = b.quantize_u8();
    let window = gaussian_window();
    let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
    let c2 = (SSIM_K2 * 255.0) * (SSIM_K2 * 255.0);
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;

    let mut total = 0.0;
    for ch in 0..3 {
        let row_sums = exec::map_indexed(oh, |y| {
            let mut row_total = 0.0;
            for x in 0..ow {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for (dy, wrow) in window.iter().enumerate() {
                    for (dx, &wv) in wrow.iter().enumerate() {
                        mu_a += wv * qa[(ch, y + dy, x + dx)] as f64;
                        mu_b += wv * qb[(ch, y + dy, x + dx)] as f64;
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for (dy, wrow) in window.iter().enumerate() {
                    for (dx, &wv) in wrow.iter().enumerate() {
                        let da = qa[(ch, y + dy, x + dx)] as f64 - mu_a;
                        let db = qb[(ch, y + dy, x + dx)] as f64 - mu_b;
                        var_a += wv * da * da;
                        var_b += wv * db * db;
                        cov += wv * da * db;
                    }
                }
                row_total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            }
            row_total
        });
        total += row_sums.iter().sum::<f64>();
    }
    Ok(total / (3 * oh * ow) as f64)
}

/// SSIM of two bitwise-identical frames is exactly 1.
pub fn ssim_self_is_one(a: &Frame) -> Result<bool> {
    Ok(ssim(a, a)? == 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Protocol {
    /// One middle frame per triplet.
    Middle,
    /// Seven recursive-bisection frames per 9-frame clip.
    Recursion7,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Middle => "middle",
            Protocol::Recursion7 => "recursion7",
        }
    }
}

/// Evaluation data for one protocol.
pub enum BenchmarkSet {
    Triplets(Vec<Triplet>),
    Clips(Vec<Clip>),
}

impl BenchmarkSet {
    pub fn len(&self) -> usize {
        match self {
            BenchmarkSet::Triplets(v) => v.len(),
            BenchmarkSet::Clips(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub protocol: String,
    pub config: CascadeConfig,
    pub items: Vec<ItemMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub wall_time_s: f64,
    /// `(max denoiser input area px, full-resolution buffer bytes)`.
    pub peak_activation: Option<(usize, usize)>,
}

impl MetricReport {
    fn from_items(
        protocol: Protocol,
        config: &CascadeConfig,
        items: Vec<ItemMetrics>,
        wall_time_s: f64,
    ) -> Self {
        let n = items.len().max(1) as f64;
        let mean_psnr = items.iter().map(|m| m.psnr).sum::<f64>() / n;
        let mean_ssim = items.iter().map(|m| m.ssim).sum::<f64>() / n;
        MetricReport {
            protocol: protocol.name().to_string(),
            config: config.clone(),
            items,
            mean_psnr,
            mean_ssim,
            wall_time_s,
            peak_activation: None,
        }
    }

    /// Short stable hash of the configuration (embedded in file names).
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.protocol.as_bytes());
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let digest = hasher.finalize();
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Human-readable aligned table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "protocol {}  levels {}  patch {}x{}  steps {}  samples {}  seed {}\n",
            self.protocol,
            self.config.num_levels,
            self.config.patch_size.0,
            self.config.patch_size.1,
            self.config.steps_per_level,
            self.config.num_samples,
            self.config.rng_seed,
        ));
        out.push_str(&format!("{:<32} {:>9} {:>8}\n", "item", "psnr(dB)", "ssim"));
        for m in &self.items {
            out.push_str(&format!("{:<32} {:>9.3} {:>8.4}\n", m.id, m.psnr, m.ssim));
        }
        out.push_str(&format!("{:<32} {:>9.3} {:>8.4}\n", "mean", self.mean_psnr, self.mean_ssim));
        if let Some((area, bytes)) = self.peak_activation {
            out.push_str(&format!("peak denoiser input {area} px, full-res buffers {bytes} B\n"));
        }
        out.push_str(&format!("wall time {:.2}s\n", self.wall_time_s));
        out
    }

    /// Machine-readable line-delimited records (one JSON object per item).
    pub fn records(&self) -> String {
        let mut out = String::new();
        for m in &self.items {
            out.push_str(&serde_json::to_string(m).expect("item serializes"));
            out.push('\n');
        }
        out
    }

    /// Write `report_<hash>.txt` and `report_<hash>.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let hash = self.config_hash();
        let table_path = dir.join(format!("report_{hash}.txt"));
        let records_path = dir.join(format!("report_{hash}.jsonl"));
        std::fs::write(&table_path, self.table())?;
        std::fs::write(&records_path, self.records())?;
        Ok((table_path, records_path))
    }
}

/// Evaluate a model over a dataset under one protocol with a fixed seed.
/// Per-item seeds are derived from the config seed and the item index, so
/// results are independent of evaluation order.
pub fn run_benchmark(
    denoiser: &dyn Denoiser,
    set: &BenchmarkSet,
    cfg: &CascadeConfig,
    protocol: Protocol,
) -> Result<MetricReport> {
    let start = Instant::now();
    let items: Vec<Result<ItemMetrics>> = match (protocol, set) {
        (Protocol::Middle, BenchmarkSet::Triplets(triplets)) => {
            exec::map_indexed(triplets.len(), |idx| {
                let t = &triplets[idx];
                let mut item_cfg = cfg.clone();
                item_cfg.rng_seed = derive_seed(cfg.rng_seed, idx as u64);
                let pred = interpolate(denoiser, &t.i0, &t.i2, &item_cfg)?;
                Ok(ItemMetrics {
                    id: t.source_id.clone(),
                    psnr: psnr(&pred, &t.i1)?,
                    ssim: ssim(&pred, &t.i1)?,
                })
            })
        }
        (Protocol::Recursion7, BenchmarkSet::Clips(clips)) => {
            exec::map_indexed(clips.len(), |idx| {
                let clip = &clips[idx];
                if clip.frames.len() != 9 {
                    return Err(Error::Dataset(format!(
                        "recursion7 needs 9-frame clips, {} has {}",
                        clip.source_id,
                        clip.frames.len()
                    )));
                }
                let mut item_cfg = cfg.clone();
                item_cfg.rng_seed = derive_seed(cfg.rng_seed, idx as u64);
                let preds = interpolate_recursive(
                    denoiser,
                    &clip.frames[0],
                    &clip.frames[8],
                    7,
                    &item_cfg,
                )?;
                debug_assert_eq!(preds.len(), 7);
                let mut p_total = 0.0;
                let mut s_total = 0.0;
                for (k, pred) in preds.iter().enumerate() {
                    p_total += psnr(pred, &clip.frames[k + 1])?;
                    s_total += ssim(pred, &clip.frames[k + 1])?;
                }
                Ok(ItemMetrics {
                    id: clip.source_id.clone(),
                    psnr: p_total / 7.0,
                    ssim: s_total / 7.0,
                })
            })
        }
        _ => {
            return Err(Error::Config(format!(
                "protocol {} does not match the provided dataset kind",
                protocol.name()
            )))
        }
    };
    let items = items.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_items(protocol, cfg, items, start.elapsed().as_secs_f64()))
}

/// Sweep axis: one benchmark run per value, everything else fixed.
#[derive(Debug, Clone)]
pub enum SweepAxis {
    Steps(Vec<usize>),
    PatchSize(Vec<(usize, usize)>),
    Levels(Vec<usize>),
    Samples(Vec<usize>),
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub label: String,
    /// Patch-grid overlap ratio on the first item, for patch-size sweeps.
    pub overlap_ratio: Option<f64>,
    pub report: MetricReport,
}

pub fn sweep(
    denoiser: &dyn Denoiser,
    set: &BenchmarkSet,
    base_cfg: &CascadeConfig,
    axis: &SweepAxis,
    protocol: Protocol,
) -> Result<Vec<SweepRow>> {
    let first_hw = match set {
        BenchmarkSet::Triplets(v) => {
            v.first().map(|t| t.hw()).ok_or_else(|| Error::Dataset("empty sweep dataset".into()))?
        }
        BenchmarkSet::Clips(v) => v
            .first()
            .and_then(|c| c.frames.first().map(|f| f.hw()))
            .ok_or_else(|| Error::Dataset("empty sweep dataset".into()))?,
    };
    let mut rows = Vec::new();
    let variants: Vec<(String, CascadeConfig, Option<f64>)> = match axis {
        SweepAxis::Steps(values) => values
            .iter()
            .map(|&s| {
                let mut cfg = base_cfg.clone();
                cfg.steps_per_level = s;
                (format!("steps={s}"), cfg, None)
            })
            .collect(),
        SweepAxis::Samples(values) => values
            .iter()
            .map(|&s| {
                let mut cfg = base_cfg.clone();
                cfg.num_samples = s;
                (format!("samples={s}"), cfg, None)
            })
            .collect(),
        SweepAxis::Levels(values) => values
            .iter()
            .map(|&n| {
                let mut cfg = base_cfg.clone();
                cfg.num_levels = n;
                (format!("levels={n}"), cfg, None)
            })
            .collect(),
        SweepAxis::PatchSize(values) => values
            .iter()
            .map(|&(h, w)| {
                let mut cfg = base_cfg.clone();
                cfg.patch_size = (h, w);
                let ratio = plan_grid(first_hw, (h, w)).map(|g| g.overlap_ratio()).ok();
                (format!("patch={h}x{w}"), cfg, ratio)
            })
            .collect(),
    };
    for (label, cfg, overlap_ratio) in variants {
        let report = run_benchmark(denoiser, set, &cfg, protocol)?;
        rows.push(SweepRow { label, overlap_ratio, report });
    }
    Ok(rows)
}

/// Aligned text table for a sweep.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>9} {:>8} {:>9} {:>10}\n",
        "variant", "psnr(dB)", "ssim", "overlap", "time(s)"
    ));
    for row in rows {
        let overlap =
            row.overlap_ratio.map_or_else(|| "-".to_string(), |r| format!("{r:.3}"));
        out.push_str(&format!(
            "{:<16} {:>9.3} {:>8.4} {:>9} {:>10.2}\n",
            row.label, row.report.mean_psnr, row.report.mean_ssim, overlap, row.report.wall_time_s
        ));
    }
    out
}
