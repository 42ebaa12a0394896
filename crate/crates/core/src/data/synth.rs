//! Moving-shape videos over sinusoidal backgrounds.
//!
//! Generation order for one video, all from `Rng::new(seed)`:
//! base color (3 draws), texture frequencies and phases (5 draws), object
//! color (1 draw), initial top-left corner (2 draws), background noise field
//! (`H*W*3` draws, row-major), object noise field (`side*side*3` draws), then
//! per frame after the first a `(dy, dx)` walk step.

use std::f64::consts::TAU;

use super::VideoSequence;
use crate::error::{Error, Result};
use crate::model::FEATURE_STRIDE;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape: ShapeKind,
    /// Object side (or diameter) as a fraction of `min(height, width)`.
    pub scale: f64,
    /// Maximum walk step per axis per frame, in pixels.
    pub step: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_frames: 16,
            height: 64,
            width: 64,
            shape: ShapeKind::Square,
            scale: 0.25,
            step: 3,
        }
    }
}

pub const NOISE_AMPLITUDE: f64 = 0.1;
const TEXTURE_AMPLITUDE: f64 = 0.15;

impl SynthConfig {
    pub fn object_side(&self) -> usize {
        (self.scale * self.height.min(self.width) as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::InvalidArgument("n_frames must be positive".into()));
        }
        if self.height == 0
            || self.width == 0
            || self.height % FEATURE_STRIDE != 0
            || self.width % FEATURE_STRIDE != 0
        {
            return Err(Error::InvalidArgument(format!(
                "height and width must be positive multiples of {FEATURE_STRIDE}, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.1..=0.4).contains(&self.scale) {
            return Err(Error::InvalidArgument(format!("scale {} outside [0.1, 0.4]", self.scale)));
        }
        if self.step > 3 {
            return Err(Error::InvalidArgument(format!("walk step {} exceeds 3", self.step)));
        }
        let side = self.object_side();
        if side == 0 || side > self.height || side > self.width {
            return Err(Error::InvalidArgument(format!(
                "object side {side} does not fit a {}x{} frame",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn reflect(p: i64, max: i64) -> i64 {
    let p = if p < 0 { -p } else { p };
    let p = if p > max { 2 * max - p } else { p };
    p.clamp(0, max)
}

fn inside(shape: ShapeKind, side: usize, dy: usize, dx: usize) -> bool {
    match shape {
        ShapeKind::Square => true,
        ShapeKind::Disk => {
            let c = (side as f64 - 1.0) / 2.0;
            let r = side as f64 / 2.0;
            let (y, x) = (dy as f64 - c, dx as f64 - c);
            y * y + x * x <= r * r
        }
    }
}

pub fn generate_video(video_id: &str, cfg: &SynthConfig) -> Result<VideoSequence> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let side = cfg.object_side();
    let mut rng = Rng::new(cfg.seed);

    let base: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.35, 0.65)).collect();
    let fy = rng.uniform_range(0.1, 0.4);
    let fx = rng.uniform_range(0.1, 0.4);
    let phase: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.0, TAU)).collect();
    // Saturated corner color: every channel is far from the background band.
    let corner = rng.below(8);
    let color: Vec<f64> = (0..3).map(|ch| if corner >> ch & 1 == 1 { 0.95 } else { 0.05 }).collect();

    let (max_top, max_left) = ((h - side) as i64, (w - side) as i64);
    let mut top = rng.int_inclusive(0, max_top);
    let mut left = rng.int_inclusive(0, max_left);

    let mut noise = |n: usize| -> Vec<f64> { (0..n).map(|_| NOISE_AMPLITUDE * (2.0 * rng.uniform() - 1.0)).collect() };
    let bg_noise = noise(h * w * 3);
    let obj_noise = noise(side * side * 3);

    let mut background = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let i = (y * w + x) * 3 + ch;
                let tex = TEXTURE_AMPLITUDE * (fx * x as f64 + fy * y as f64 + phase[ch]).sin();
                background[i] = (base[ch] + tex + bg_noise[i]).clamp(0.0, 1.0);
            }
        }
    }

    let step = cfg.step as i64;
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut masks = Vec::with_capacity(cfg.n_frames);
    for t in 0..cfg.n_frames {
        if t > 0 {
            let dy = rng.int_inclusive(-step, step);
            let dx = rng.int_inclusive(-step, step);
            top = reflect(top + dy, max_top);
            left = reflect(left + dx, max_left);
        }
        let mut img = background.clone();
        let mut mask = vec![0.0; h * w];
        for dy in 0..side {
            for dx in 0..side {
                if !inside(cfg.shape, side, dy, dx) {
                    continue;
                }
                let (y, x) = (top as usize + dy, left as usize + dx);
                mask[y * w + x] = 1.0;
                for ch in 0..3 {
                    let v = color[ch] + obj_noise[(dy * side + dx) * 3 + ch];
                    img[(y * w + x) * 3 + ch] = v.clamp(0.0, 1.0);
                }
            }
        }
        frames.push(Tensor::new(vec![h, w, 3], img)?);
        masks.push(Tensor::new(vec![h, w], mask)?);
    }
    Ok(VideoSequence {
        video_id: video_id.to_string(),
        frames,
        masks,
    })
}
