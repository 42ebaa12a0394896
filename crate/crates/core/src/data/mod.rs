//! Synthetic videos, netpbm image I/O, and the on-disk dataset layout.

pub mod dataset;
pub mod netpbm;
pub mod synth;

pub use dataset::{frame_file_name, load_dataset, load_frames, load_video_dir, save_video};
pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use synth::{generate_video, ShapeKind, SynthConfig};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered frames `(H, W, 3)` in `[0, 1]` with binary `(H, W)` masks.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub video_id: String,
    pub frames: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.masks.len() {
            return Err(Error::Dataset(format!(
                "{}: {} frames but {} masks",
                self.video_id,
                self.frames.len(),
                self.masks.len()
            )));
        }
        for (i, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            let [h, w, _] = f.dims3("video frame")?;
            if m.shape() != [h, w] {
                return Err(Error::Dataset(format!("{} frame {i}: mask shape {:?}", self.video_id, m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Dataset(format!("{} frame {i}: mask is not binary", self.video_id)));
            }
        }
        Ok(())
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
