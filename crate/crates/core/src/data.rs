//! Datasets: triplet ingestion from frame directories, the augmentation
//! stack, synthetic scene generation with exact ground truth, and offline
//! half-resolution intermediates for cascade training.
//!
//! On-disk layout: `<root>/<clip_id>/frame_0.png .. frame_{N-1}.png`, three
//! frames for triplets and nine for the recursive-evaluation clips, plus an
//! optional `lowres_pred.png` written by [`precompute_lowres`]. The manifest
//! is a tab-separated line per record.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::cascade::{base_predict, downsample, CascadeConfig};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::model::Denoiser;
use crate::schedule::derive_seed;

pub const LOWRES_FILE: &str = "lowres_pred.png";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Three equally-sized frames; `i1` is the temporal middle.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub i0: Frame,
    pub i1: Frame,
    pub i2: Frame,
    pub source_id: String,
    pub frame_indices: (usize, usize, usize),
}

impl Triplet {
    pub fn new(i0: Frame, i1: Frame, i2: Frame, source_id: String) -> Result<Self> {
        i0.ensure_same_shape(&i1, "triplet frames")?;
        i0.ensure_same_shape(&i2, "triplet frames")?;
        Ok(Triplet { i0, i1, i2, source_id, frame_indices: (0, 1, 2) })
    }

    pub fn hw(&self) -> (usize, usize) {
        self.i0.hw()
    }
}

/// A clip of `n` equally-sized frames (nine for the recursion protocol).
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub source_id: String,
}

/// A triplet plus its optional precomputed half-resolution intermediate.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub triplet: Triplet,
    pub lowres: Option<Frame>,
}

/// Augmentation: random crop plus horizontal/vertical/temporal flips, with
/// an optional multi-resolution crop that samples a larger rectangle and
/// resizes it down to the crop size.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub crop_size: (usize, usize),
    pub flip_h: f64,
    pub flip_v: f64,
    pub flip_t: f64,
    pub multires_crop: bool,
}

impl AugmentConfig {
    /// Full-scale base-model crop.
    pub fn base() -> Self {
        AugmentConfig { crop_size: (352, 480), flip_h: 0.5, flip_v: 0.5, flip_t: 0.5, multires_crop: true }
    }

    /// Full-scale cascade-model crop.
    pub fn cascade() -> Self {
        AugmentConfig { crop_size: (224, 288), ..Self::base() }
    }

    /// Desk-scale crops.
    pub fn toy_base() -> Self {
        AugmentConfig { crop_size: (64, 64), flip_h: 0.5, flip_v: 0.5, flip_t: 0.5, multires_crop: false }
    }

    pub fn toy_cascade() -> Self {
        AugmentConfig { crop_size: (64, 96), ..Self::toy_base() }
    }

    pub fn identity(crop_size: (usize, usize)) -> Self {
        AugmentConfig { crop_size, flip_h: 0.0, flip_v: 0.0, flip_t: 0.0, multires_crop: false }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.flip_h, self.flip_v, self.flip_t] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("flip probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Apply the same geometric transform to all three frames; the temporal
/// flip swaps `i0` and `i2`.
pub fn augment<R: Rng>(t: &Triplet, cfg: &AugmentConfig, rng: &mut R) -> Result<Triplet> {
    let item = TrainItem { triplet: t.clone(), lowres: None };
    Ok(augment_item(&item, cfg, rng)?.triplet)
}

/// Augmentation that keeps the half-resolution intermediate consistent with
/// the triplet: crop coordinates and sizes are snapped to even values so the
/// lowres frame can be cropped at exactly half coordinates.
pub fn augment_item<R: Rng>(
    item: &TrainItem,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<TrainItem> {
    cfg.validate()?;
    let t = &item.triplet;
    let (h, w) = t.hw();
    let (ch, cw) = cfg.crop_size;
    if ch > h || cw > w {
        return Err(Error::Domain(format!("crop {ch}x{cw} larger than frame {h}x{w}")));
    }
    let has_lowres = item.lowres.is_some();
    if has_lowres && (ch % 2 != 0 || cw % 2 != 0 || h % 2 != 0 || w % 2 != 0) {
        return Err(Error::Config(
            "crop and frame dims must be even when a lowres intermediate is present".into(),
        ));
    }

    // Rectangle to crop (possibly larger than the final crop, then resized).
    let (mut rect_h, mut rect_w) = (ch, cw);
    if cfg.multires_crop {
        let s: f64 = rng.random();
        rect_h = ch + ((h - ch) as f64 * s).round() as usize;
        rect_w = cw + ((w - cw) as f64 * s).round() as usize;
    }
    if has_lowres {
        rect_h &= !1;
        rect_w &= !1;
    }
    rect_h = rect_h.clamp(ch, h);
    rect_w = rect_w.clamp(cw, w);

    let mut y = if h == rect_h { 0 } else { rng.random_range(0..=h - rect_h) };
    let mut x = if w == rect_w { 0 } else { rng.random_range(0..=w - rect_w) };
    if has_lowres {
        y &= !1;
        x &= !1;
    }

    let crop_resize = |f: &Frame| -> Result<Frame> {
        let c = f.crop(y, x, rect_h, rect_w)?;
        Ok(if (rect_h, rect_w) == (ch, cw) { c } else { c.resize_bilinear(ch, cw) })
    };
    let mut i0 = crop_resize(&t.i0)?;
    let mut i1 = crop_resize(&t.i1)?;
    let mut i2 = crop_resize(&t.i2)?;
    let mut lowres = match &item.lowres {
        Some(lr) => {
            let c = lr.crop(y / 2, x / 2, rect_h / 2, rect_w / 2)?;
            Some(if (rect_h, rect_w) == (ch, cw) { c } else { c.resize_bilinear(ch / 2, cw / 2) })
        }
        None => None,
    };

    if rng.random::<f64>() < cfg.flip_h {
        i0 = i0.flip_horizontal();
        i1 = i1.flip_horizontal();
        i2 = i2.flip_horizontal();
        lowres = lowres.map(|f| f.flip_horizontal());
    }
    if rng.random::<f64>() < cfg.flip_v {
        i0 = i0.flip_vertical();
        i1 = i1.flip_vertical();
        i2 = i2.flip_vertical();
        lowres = lowres.map(|f| f.flip_vertical());
    }
    if rng.random::<f64>() < cfg.flip_t {
        std::mem::swap(&mut i0, &mut i2);
    }

    let mut triplet = Triplet::new(i0, i1, i2, t.source_id.clone())?;
    triplet.frame_indices = t.frame_indices;
    Ok(TrainItem { triplet, lowres })
}

/// Texture families for synthetic scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Checker,
    Stripes,
    NoiseTile,
    Sprite,
}

impl TextureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(TextureKind::Checker),
            "stripes" => Ok(TextureKind::Stripes),
            "noise-tile" => Ok(TextureKind::NoiseTile),
            "sprite" => Ok(TextureKind::Sprite),
            other => Err(Error::Config(format!(
                "unknown texture '{other}' (expected checker|stripes|noise-tile|sprite)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Checker => "checker",
            TextureKind::Stripes => "stripes",
            TextureKind::NoiseTile => "noise-tile",
            TextureKind::Sprite => "sprite",
        }
    }
}

/// Generator spec: a texture advected by a constant displacement with
/// toroidal wrap-around, so the middle frame is an exact half shift.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub canvas: (usize, usize),
    pub texture: TextureKind,
    /// Whole-canvas displacement in pixels (dy, dx); both must be even.
    pub displacement: (i64, i64),
    pub count: usize,
}

pub fn generate_synthetic(spec: &SyntheticSpec, rng_seed: u64) -> Result<Vec<Triplet>> {
    let clips = generate_synthetic_clips(spec, 3, rng_seed)?;
    clips
        .into_iter()
        .map(|clip| {
            let mut frames = clip.frames.into_iter();
            let i0 = frames.next().unwrap();
            let i1 = frames.next().unwrap();
            let i2 = frames.next().unwrap();
            Triplet::new(i0, i1, i2, clip.source_id)
        })
        .collect()
}

/// Clips of `frame_count` frames at times `j / (frame_count - 1)` along the
/// displacement; the displacement must be divisible by `frame_count - 1` in
/// both axes so every frame is an integral shift.
pub fn generate_synthetic_clips(
    spec: &SyntheticSpec,
    frame_count: usize,
    rng_seed: u64,
) -> Result<Vec<Clip>> {
    if frame_count < 2 {
        return Err(Error::Config("clips need at least two frames".into()));
    }
    let denom = (frame_count - 1) as i64;
    let (dy, dx) = spec.displacement;
    if dy % denom != 0 || dx % denom != 0 {
        return Err(Error::Domain(format!(
            "displacement ({dy},{dx}) not divisible by {denom}; ground truth would be fractional"
        )));
    }
    let (step_y, step_x) = (dy / denom, dx / denom);
    let mut out = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, k as u64));
        let texture = render_texture(spec.texture, spec.canvas, &mut rng);
        let frames = (0..frame_count)
            .map(|j| texture.roll(step_y * j as i64, step_x * j as i64))
            .collect();
        out.push(Clip {
            frames,
            source_id: format!("{}_{:+}x{:+}_{:04}", spec.texture.name(), dy, dx, k),
        });
    }
    Ok(out)
}

/// Small fixed palette: spatial structure varies per clip, colors do not, so
/// desk-scale models spend capacity on correspondence rather than color
/// regression.
const PALETTE: [[f32; 3]; 4] = [
    [-0.85, -0.85, -0.85],
    [0.85, 0.85, 0.85],
    [0.7, -0.4, -0.4],
    [-0.5, 0.2, 0.8],
];

fn palette_pair<R: Rng>(rng: &mut R) -> ([f32; 3], [f32; 3]) {
    let a = rng.random_range(0..PALETTE.len());
    let mut b = rng.random_range(0..PALETTE.len() - 1);
    if b >= a {
        b += 1;
    }
    (PALETTE[a], PALETTE[b])
}

fn render_texture<R: Rng>(kind: TextureKind, canvas: (usize, usize), rng: &mut R) -> Frame {
    let (h, w) = canvas;
    match kind {
        TextureKind::Checker => {
            let period = *[8usize, 16].get(rng.random_range(0..2)).unwrap();
            let phase_y = rng.random_range(0..period);
            let phase_x = rng.random_range(0..period);
            let (c1, c2) = palette_pair(rng);
            Frame::from_fn(h, w, |c, y, x| {
                let parity = ((y + phase_y) / period + (x + phase_x) / period) % 2;
                if parity == 0 { c1[c] } else { c2[c] }
            })
        }
        TextureKind::Stripes => {
            let period = *[6usize, 8, 12].get(rng.random_range(0..3)).unwrap();
            let horizontal = rng.random::<bool>();
            let phase = rng.random_range(0..period);
            let (c1, c2) = palette_pair(rng);
            Frame::from_fn(h, w, |c, y, x| {
                let coord = if horizontal { y } else { x };
                if ((coord + phase) / period) % 2 == 0 { c1[c] } else { c2[c] }
            })
        }
        TextureKind::NoiseTile => {
            let tile = *[4usize, 8].get(rng.random_range(0..2)).unwrap();
            let th = h.div_ceil(tile);
            let tw = w.div_ceil(tile);
            let mut values = vec![[0.0f32; 3]; th * tw];
            for v in values.iter_mut() {
                *v = PALETTE[rng.random_range(0..PALETTE.len())];
            }
            Frame::from_fn(h, w, |c, y, x| values[(y / tile) * tw + x / tile][c])
        }
        TextureKind::Sprite => {
            let bg = [-0.6f32, -0.55, -0.5];
            let mut frame = Frame::constant_rgb(h, w, bg);
            let sprites = rng.random_range(3..=6);
            for _ in 0..sprites {
                let sh = rng.random_range(h / 6..=h / 3).max(1);
                let sw = rng.random_range(w / 6..=w / 3).max(1);
                let sy = rng.random_range(0..h);
                let sx = rng.random_range(0..w);
                let color = PALETTE[rng.random_range(0..PALETTE.len())];
                for y in 0..sh {
                    for x in 0..sw {
                        // Wrap so sprites stay consistent under toroidal motion.
                        let yy = (sy + y) % h;
                        let xx = (sx + x) % w;
                        for c in 0..3 {
                            frame.data_mut()[(c, yy, xx)] = color[c];
                        }
                    }
                }
            }
            frame
        }
    }
}

/// Write a triplet (or clip) to the directory layout.
pub fn save_clip_frames(dir: &Path, frames: &[&Frame]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (j, frame) in frames.iter().enumerate() {
        frame.save_png(&dir.join(format!("frame_{j}.png")))?;
    }
    Ok(())
}

pub fn save_triplet(dir: &Path, t: &Triplet) -> Result<()> {
    save_clip_frames(dir, &[&t.i0, &t.i1, &t.i2])
}

/// Deterministic lazily-decoded triplet stream; malformed clips are skipped
/// with a warning.
pub struct TripletStream {
    dirs: std::vec::IntoIter<(String, PathBuf)>,
}

impl Iterator for TripletStream {
    type Item = Triplet;

    fn next(&mut self) -> Option<Triplet> {
        for (id, dir) in self.dirs.by_ref() {
            match load_triplet_dir(&dir, &id) {
                Ok(t) => return Some(t),
                Err(e) => log::warn!("skipping clip {id}: {e}"),
            }
        }
        None
    }
}

fn clip_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("unreadable dataset root {root:?}: {e}")))?
    {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn load_triplet_dir(dir: &Path, id: &str) -> Result<Triplet> {
    let load = |j: usize| Frame::load_png(&dir.join(format!("frame_{j}.png")));
    Triplet::new(load(0)?, load(1)?, load(2)?, id.to_string())
}

/// Stream triplets from `<root>/<clip_id>/frame_{0,1,2}.png` in sorted
/// clip-id order.
pub fn load_triplets(root: &Path) -> Result<TripletStream> {
    Ok(TripletStream { dirs: clip_dirs(root)?.into_iter() })
}

/// Load triplets together with their precomputed lowres intermediates.
pub fn load_train_items(root: &Path) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for (id, dir) in clip_dirs(root)? {
        match load_triplet_dir(&dir, &id) {
            Ok(triplet) => {
                let lowres_path = dir.join(LOWRES_FILE);
                let lowres = if lowres_path.exists() {
                    Some(Frame::load_png(&lowres_path)?)
                } else {
                    None
                };
                items.push(TrainItem { triplet, lowres });
            }
            Err(e) => log::warn!("skipping clip {id}: {e}"),
        }
    }
    Ok(items)
}

/// Load fixed-length clips (`frame_0 .. frame_{len-1}`).
pub fn load_clips(root: &Path, len: usize) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    for (id, dir) in clip_dirs(root)? {
        let frames: Result<Vec<Frame>> =
            (0..len).map(|j| Frame::load_png(&dir.join(format!("frame_{j}.png")))).collect();
        match frames {
            Ok(frames) => clips.push(Clip { frames, source_id: id }),
            Err(e) => log::warn!("skipping clip {id}: {e}"),
        }
    }
    Ok(clips)
}

/// For every triplet under `root`, predict the middle frame at half
/// resolution with the base model (2x-downsampled inputs, zero condition)
/// and store it next to the frames; returns the manifest path.
///
/// The inference is deterministic per clip (seed derived from the config
/// seed and the clip index), so re-running produces identical files.
pub fn precompute_lowres(
    denoiser: &dyn Denoiser,
    root: &Path,
    cfg: &CascadeConfig,
) -> Result<PathBuf> {
    let dirs = clip_dirs(root)?;
    let manifest_path = root.join(MANIFEST_FILE);
    let mut manifest = fs::File::create(&manifest_path)?;
    for (idx, (id, dir)) in dirs.iter().enumerate() {
        let triplet = load_triplet_dir(dir, id)?;
        let i0_half = downsample(&triplet.i0, 2)?;
        let i2_half = downsample(&triplet.i2, 2)?;
        let mut item_cfg = cfg.clone();
        item_cfg.rng_seed = derive_seed(cfg.rng_seed, idx as u64);
        let pred = base_predict(denoiser, &i0_half, &i2_half, &item_cfg)?;
        let lowres_path = dir.join(LOWRES_FILE);
        pred.save_png(&lowres_path)?;
        writeln!(
            manifest,
            "{id}\t{}\t{}\t{}\t{}",
            dir.join("frame_0.png").display(),
            dir.join("frame_1.png").display(),
            dir.join("frame_2.png").display(),
            lowres_path.display(),
        )?;
    }
    Ok(manifest_path)
}
