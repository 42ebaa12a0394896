//! `key = value` run configuration. Blank lines and `#` comments are ignored;
//! unknown or repeated keys are errors.

use std::path::{Path, PathBuf};

use salattn::data::{ShapeKind, SynthConfig};
use salattn::model::{TrainConfig, FEATURE_STRIDE};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub batch_videos: usize,
    pub frames_per_video: usize,
    pub tau: f64,
    pub k_pos: usize,
    pub k_neg: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dataset_root: PathBuf,
    pub checkpoint_path: PathBuf,
    pub output_dir: PathBuf,
    /// Videos written by `synth`.
    pub synth_videos: usize,
    /// Frames per synthesized video.
    pub synth_frames: usize,
    /// Trailing videos (in id order) that `train` leaves out.
    pub holdout_videos: usize,
    pub use_attention: bool,
    pub use_contrastive: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            lr: t.learning_rate,
            steps: t.steps,
            batch_videos: t.batch_videos,
            frames_per_video: t.frames_per_video,
            tau: t.tau,
            k_pos: t.k_pos,
            k_neg: t.k_neg,
            height: 64,
            width: 64,
            channels: 32,
            dataset_root: PathBuf::from("data"),
            checkpoint_path: PathBuf::from("model.ckpt"),
            output_dir: PathBuf::from("out"),
            synth_videos: 10,
            synth_frames: 16,
            holdout_videos: 2,
            use_attention: true,
            use_contrastive: true,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "lr",
    "steps",
    "batch_videos",
    "frames_per_video",
    "tau",
    "k_pos",
    "k_neg",
    "height",
    "width",
    "channels",
    "dataset_root",
    "checkpoint_path",
    "output_dir",
    "synth_videos",
    "synth_frames",
    "holdout_videos",
    "use_attention",
    "use_contrastive",
];

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::ConfigValue(msg.into())
}

fn bad(line: usize, msg: impl Into<String>) -> CliError {
    CliError::Config { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(line, format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(bad(line, format!("unknown key {key:?}")));
            };
            if seen.contains(&known) {
                return Err(bad(line, format!("{key} set twice")));
            }
            seen.push(known);
            match known {
                "seed" => cfg.seed = parse_num(line, key, value)?,
                "lr" => cfg.lr = parse_num(line, key, value)?,
                "steps" => cfg.steps = parse_num(line, key, value)?,
                "batch_videos" => cfg.batch_videos = parse_num(line, key, value)?,
                "frames_per_video" => cfg.frames_per_video = parse_num(line, key, value)?,
                "tau" => cfg.tau = parse_num(line, key, value)?,
                "k_pos" => cfg.k_pos = parse_num(line, key, value)?,
                "k_neg" => cfg.k_neg = parse_num(line, key, value)?,
                "height" => cfg.height = parse_num(line, key, value)?,
                "width" => cfg.width = parse_num(line, key, value)?,
                "channels" => cfg.channels = parse_num(line, key, value)?,
                "dataset_root" => cfg.dataset_root = PathBuf::from(value),
                "checkpoint_path" => cfg.checkpoint_path = PathBuf::from(value),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "synth_videos" => cfg.synth_videos = parse_num(line, key, value)?,
                "synth_frames" => cfg.synth_frames = parse_num(line, key, value)?,
                "holdout_videos" => cfg.holdout_videos = parse_num(line, key, value)?,
                "use_attention" => cfg.use_attention = parse_bool(line, key, value)?,
                "use_contrastive" => cfg.use_contrastive = parse_bool(line, key, value)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Numeric keys must be positive; `steps` and `holdout_videos` may be zero.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_videos", self.batch_videos),
            ("frames_per_video", self.frames_per_video),
            ("k_pos", self.k_pos),
            ("k_neg", self.k_neg),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("synth_videos", self.synth_videos),
            ("synth_frames", self.synth_frames),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{key} must be positive")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        for (key, v) in [("height", self.height), ("width", self.width)] {
            if v % FEATURE_STRIDE != 0 {
                return Err(invalid(format!("{key} = {v} is not divisible by {FEATURE_STRIDE}")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_videos: self.batch_videos,
            frames_per_video: self.frames_per_video,
            steps: self.steps,
            tau: self.tau,
            k_pos: self.k_pos,
            k_neg: self.k_neg,
            seed: self.seed,
            attention: self.use_attention,
            contrastive: self.use_contrastive,
        }
    }

    /// Generator settings for the `index`-th synthesized video: per-video seed
    /// derived from `seed`, alternating square and disk, scale in `[0.15, 0.35]`.
    pub fn synth_config(&self, index: usize) -> SynthConfig {
        let mut rng = salattn::Rng::derive(self.seed, 0x7379_6e74_6800_0000 | index as u64);
        let seed = rng.next_u64();
        let scale = rng.uniform_range(0.15, 0.35);
        SynthConfig {
            seed,
            n_frames: self.synth_frames,
            height: self.height,
            width: self.width,
            shape: if index % 2 == 0 { ShapeKind::Square } else { ShapeKind::Disk },
            scale,
            step: 3,
        }
    }
}
