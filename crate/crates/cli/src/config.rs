//! Flat `key = value` run configuration files.
//!
//! Unknown keys are rejected with a message naming them. Command-line flags
//! override file values; the merged result builds the train/model configs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use midframe_core::data::AugmentConfig;
use midframe_core::model::{default_attention_levels, ModelConfig};
use midframe_core::trainer::{TrainConfig, TrainMode};

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "batch_size",
    "lr",
    "warmup_steps",
    "total_steps",
    "dropout_p",
    "seed",
    "checkpoint_every",
    "val_every",
    "crop_h",
    "crop_w",
    "flip_h",
    "flip_v",
    "flip_t",
    "multires_crop",
    "base_channels",
    "channel_multipliers",
    "blocks_per_level",
    "attention_levels",
    "use_attention",
    "time_embed_dim",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::default();
        let mut unknown = Vec::new();
        for (lineno, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {} is not `key = value`: {raw:?}", lineno + 1);
            };
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                unknown.push(key.clone());
            }
            cfg.values.insert(key, value.trim().to_string());
        }
        if !unknown.is_empty() {
            bail!(
                "unknown config keys: {}; known keys are: {}",
                unknown.join(", "),
                KNOWN_KEYS.join(", ")
            );
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow::anyhow!("config key {key}={raw}: {e}")),
            None => Ok(default),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mode = match self.values.get("mode") {
            Some(raw) => TrainMode::parse(raw)?,
            None => TrainMode::Base,
        };
        let mut cfg = TrainConfig::new(mode);
        cfg.batch_size = self.get("batch_size", cfg.batch_size)?;
        cfg.lr = self.get("lr", cfg.lr)?;
        cfg.warmup_steps = self.get("warmup_steps", cfg.warmup_steps)?;
        cfg.total_steps = self.get("total_steps", cfg.total_steps)?;
        cfg.dropout_p = self.get("dropout_p", cfg.dropout_p)?;
        cfg.seed = self.get("seed", cfg.seed)?;
        cfg.checkpoint_every = self.get("checkpoint_every", cfg.checkpoint_every)?;
        cfg.val_every = self.get("val_every", cfg.val_every)?;
        let crop_h = self.get("crop_h", cfg.augment.crop_size.0)?;
        let crop_w = self.get("crop_w", cfg.augment.crop_size.1)?;
        cfg.augment = AugmentConfig {
            crop_size: (crop_h, crop_w),
            flip_h: self.get("flip_h", 0.5)?,
            flip_v: self.get("flip_v", 0.5)?,
            flip_t: self.get("flip_t", 0.5)?,
            multires_crop: self.get("multires_crop", false)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::toy();
        cfg.base_channels = self.get("base_channels", cfg.base_channels)?;
        if let Some(raw) = self.values.get("channel_multipliers") {
            cfg.channel_multipliers = parse_usize_list(raw)?;
            cfg.attention_levels = default_attention_levels(cfg.channel_multipliers.len());
        }
        cfg.blocks_per_level = self.get("blocks_per_level", cfg.blocks_per_level)?;
        if let Some(raw) = self.values.get("attention_levels") {
            cfg.attention_levels = parse_usize_list(raw)?;
        }
        cfg.use_attention = self.get("use_attention", cfg.use_attention)?;
        cfg.time_embed_dim = self.get("time_embed_dim", cfg.time_embed_dim)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_usize_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| p.trim().parse().map_err(|e| anyhow::anyhow!("bad list entry {p:?}: {e}")))
        .collect()
}

/// Parse `HxW` (e.g. `512x768`).
pub fn parse_size(raw: &str) -> Result<(usize, usize)> {
    let Some((h, w)) = raw.split_once('x') else {
        bail!("expected HxW, got {raw:?}");
    };
    Ok((h.trim().parse()?, w.trim().parse()?))
}
