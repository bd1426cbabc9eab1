use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};

pub const SCENE_MAGIC: &[u8; 8] = b"SGMIMSCN";

/// Calibration seed range for normalization statistics.
pub const CALIBRATION_SEEDS: std::ops::Range<u64> = 0..1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    pub shape_count: (usize, usize),
    pub depth_range: (f64, f64),
    pub noise_std: f64,
    pub texture_period: (usize, usize),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            h: 64,
            w: 64,
            shape_count: (3, 8),
            depth_range: (0.1, 0.9),
            noise_std: 0.02,
            texture_period: (4, 12),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(SgError::Config("scene size must be positive".into()));
        }
        if self.shape_count.0 > self.shape_count.1
            || self.texture_period.0 > self.texture_period.1
            || self.texture_period.0 == 0
        {
            return Err(SgError::Config("empty range in scene config".into()));
        }
        let (lo, hi) = self.depth_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(SgError::Config(format!(
                "depth range ({lo}, {hi}) must sit inside (0, 1)"
            )));
        }
        if self.noise_std < 0.0 {
            return Err(SgError::Config("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Paired image/depth sample. Image is H x W x 3 in [0,1], row-major
/// channel-fastest; depth is H x W in (0,1] with background exactly 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Vec<f32>,
    pub depth: Vec<f32>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub(crate) enum ShapeKind {
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Circle { cx: f64, cy: f64, r: f64 },
}

#[derive(Debug, Clone)]
pub(crate) struct SceneShape {
    pub kind: ShapeKind,
    pub z: f64,
    pub albedo: [f64; 3],
    pub period: usize,
    pub horizontal: bool,
    pub phase: usize,
}

impl SceneShape {
    fn covers(&self, x: usize, y: usize) -> bool {
        match &self.kind {
            ShapeKind::Rect { x0, y0, x1, y1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            ShapeKind::Circle { cx, cy, r } => {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }

    fn texture(&self, x: usize, y: usize) -> f64 {
        let coord = if self.horizontal { y } else { x };
        if ((coord + self.phase) / self.period) % 2 == 0 {
            1.0
        } else {
            0.7
        }
    }
}

fn shade(z: f64) -> f64 {
    1.25 - 0.25 * z
}

/// Paint shapes nearest-depth-wins onto a background at depth 1.0, then add
/// clamped Gaussian noise.
pub(crate) fn render(
    cfg: &SceneConfig,
    bg_albedo: [f64; 3],
    shapes: &[SceneShape],
    noise_rng: Option<&mut ChaCha8Rng>,
    seed: u64,
) -> Scene {
    let (h, w) = (cfg.h, cfg.w);
    let mut image = vec![0.0f32; h * w * 3];
    let mut depth = vec![1.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<&SceneShape> = None;
            for s in shapes {
                if s.covers(x, y) && best.map_or(true, |b| s.z < b.z) {
                    best = Some(s);
                }
            }
            let (albedo, tex, z) = match best {
                Some(s) => (s.albedo, s.texture(x, y), s.z),
                None => (bg_albedo, 1.0, 1.0),
            };
            depth[y * w + x] = z as f32;
            for c in 0..3 {
                image[(y * w + x) * 3 + c] = (albedo[c] * tex * shade(z)) as f32;
            }
        }
    }
    if let Some(rng) = noise_rng {
        if cfg.noise_std > 0.0 {
            let dist = Normal::new(0.0f64, cfg.noise_std).expect("valid noise std");
            for v in image.iter_mut() {
                *v = (*v as f64 + dist.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Scene { image, depth, seed }
}

/// Deterministic procedural scene: axis-aligned rectangles and circles with
/// striped textures and depth-tied shading.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_albedo = [
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
    ];
    let k = rng.gen_range(cfg.shape_count.0..=cfg.shape_count.1);
    let (h, w) = (cfg.h as f64, cfg.w as f64);
    let mut shapes = Vec::with_capacity(k);
    for _ in 0..k {
        let is_rect: bool = rng.gen();
        let kind = if is_rect {
            let rw = rng.gen_range(0.15..0.6) * w;
            let rh = rng.gen_range(0.15..0.6) * h;
            let x0 = rng.gen_range(0.0..(w - rw).max(1.0));
            let y0 = rng.gen_range(0.0..(h - rh).max(1.0));
            ShapeKind::Rect {
                x0: x0 as usize,
                y0: y0 as usize,
                x1: ((x0 + rw) as usize).min(cfg.w),
                y1: ((y0 + rh) as usize).min(cfg.h),
            }
        } else {
            ShapeKind::Circle {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..h),
                r: rng.gen_range(0.08..0.3) * w.min(h),
            }
        };
        shapes.push(SceneShape {
            kind,
            z: rng.gen_range(cfg.depth_range.0..cfg.depth_range.1),
            albedo: [
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
            ],
            period: rng.gen_range(cfg.texture_period.0..=cfg.texture_period.1),
            horizontal: rng.gen(),
            phase: rng.gen_range(0..cfg.texture_period.1),
        });
    }
    Ok(render(cfg, bg_albedo, &shapes, Some(&mut rng), seed))
}

/// Per-channel image statistics from the fixed calibration seed range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn compute_norm_stats_over(cfg: &SceneConfig, seeds: impl Iterator<Item = u64>) -> Result<NormStats> {
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0usize;
    for seed in seeds {
        let scene = generate_scene(seed, cfg)?;
        for px in scene.image.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        count += cfg.h * cfg.w;
    }
    if count == 0 {
        return Err(SgError::Config("empty calibration set".into()));
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / count as f64;
        let var = sum_sq[c] / count as f64 - mean[c] * mean[c];
        std[c] = var.max(0.0).sqrt();
        if std[c] < 1e-12 {
            return Err(SgError::Config(format!(
                "zero standard deviation in channel {c} of the calibration set"
            )));
        }
    }
    Ok(NormStats { mean, std })
}

pub fn compute_norm_stats(cfg: &SceneConfig) -> Result<NormStats> {
    compute_norm_stats_over(cfg, CALIBRATION_SEEDS)
}

/// Standardize image channels; depth is already in (0,1] and passes through.
pub fn normalize_image(image: &[f32], stats: &NormStats) -> Vec<f32> {
    image
        .chunks_exact(3)
        .flat_map(|px| {
            [
                ((px[0] as f64 - stats.mean[0]) / stats.std[0]) as f32,
                ((px[1] as f64 - stats.mean[1]) / stats.std[1]) as f32,
                ((px[2] as f64 - stats.mean[2]) / stats.std[2]) as f32,
            ]
        })
        .collect()
}

/// Consecutive disjoint seeds for a batch starting at `start`.
pub fn batch_seeds(start: u64, batch_size: usize) -> Vec<u64> {
    (0..batch_size as u64).map(|i| start + i).collect()
}

pub fn write_scene(scene: &Scene, h: usize, w: usize, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(SCENE_MAGIC)?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(w as u32).to_le_bytes())?;
    f.write_all(&scene.seed.to_le_bytes())?;
    for v in &scene.image {
        f.write_all(&v.to_le_bytes())?;
    }
    for v in &scene.depth {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<(Scene, usize, usize)> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(SgError::Integrity("bad scene file magic".into()));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let h = u32::from_le_bytes(buf4) as usize;
    f.read_exact(&mut buf4)?;
    let w = u32::from_le_bytes(buf4) as usize;
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)?;
    let seed = u64::from_le_bytes(buf8);
    let mut read_f32s = |count: usize| -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            out.push(f32::from_le_bytes(b));
        }
        Ok(out)
    };
    let image = read_f32s(h * w * 3)?;
    let depth = read_f32s(h * w)?;
    Ok((Scene { image, depth, seed }, h, w))
}
