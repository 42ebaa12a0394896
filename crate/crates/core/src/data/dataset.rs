//! `root/<video_id>/frames/NNNNN.ppm` and `root/<video_id>/masks/NNNNN.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use super::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
use super::{write_atomic, VideoSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn frame_file_name(idx: usize, ext: &str) -> String {
    format!("{idx:05}.{ext}")
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Five-digit frame indices of `dir/*.ext`, ascending.
fn indexed_files(dir: &Path, ext: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for p in sorted_entries(dir)? {
        if p.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if stem.len() != 5 || !stem.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::Dataset(format!("unexpected file name {}", p.display())));
        }
        out.push(stem.parse().unwrap());
    }
    Ok(out)
}

pub fn save_video(root: &Path, seq: &VideoSequence) -> Result<()> {
    seq.validate()?;
    let dir = root.join(&seq.video_id);
    for (i, (f, m)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        write_atomic(&dir.join("frames").join(frame_file_name(i, "ppm")), &write_ppm(f)?)?;
        write_atomic(&dir.join("masks").join(frame_file_name(i, "pgm")), &write_pgm(m)?)?;
    }
    Ok(())
}

/// Loads one `<video_id>/` directory; masks are binarized at 0.5.
pub fn load_video_dir(dir: &Path) -> Result<VideoSequence> {
    let video_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Dataset(format!("bad video directory {}", dir.display())))?
        .to_string();
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    let frame_ids = indexed_files(&frames_dir, "ppm")?;
    if frame_ids.is_empty() {
        return Err(Error::Dataset(format!("{} has no frames", frames_dir.display())));
    }
    let mask_ids = if masks_dir.is_dir() {
        indexed_files(&masks_dir, "pgm")?
    } else {
        Vec::new()
    };
    for id in &frame_ids {
        if !mask_ids.contains(id) {
            return Err(Error::MissingFile {
                path: masks_dir.join(frame_file_name(*id, "pgm")),
            });
        }
    }
    if let Some(extra) = mask_ids.iter().find(|id| !frame_ids.contains(id)) {
        return Err(Error::MissingFile {
            path: frames_dir.join(frame_file_name(*extra, "ppm")),
        });
    }
    let mut frames = Vec::with_capacity(frame_ids.len());
    let mut masks = Vec::with_capacity(frame_ids.len());
    for id in &frame_ids {
        let fp = frames_dir.join(frame_file_name(*id, "ppm"));
        let mp = masks_dir.join(frame_file_name(*id, "pgm"));
        frames.push(read_ppm(&read_file(&fp)?).map_err(|e| Error::Dataset(format!("{}: {e}", fp.display())))?);
        let mask = read_pgm(&read_file(&mp)?).map_err(|e| Error::Dataset(format!("{}: {e}", mp.display())))?;
        masks.push(mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
    }
    let seq = VideoSequence {
        video_id,
        frames,
        masks,
    };
    seq.validate()?;
    Ok(seq)
}

/// Frames of one `<video_id>/` directory as `(index, frame)`; masks are not
/// required.
pub fn load_frames(dir: &Path) -> Result<Vec<(usize, Tensor)>> {
    let frames_dir = dir.join("frames");
    let ids = indexed_files(&frames_dir, "ppm")?;
    if ids.is_empty() {
        return Err(Error::Dataset(format!("{} has no frames", frames_dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            let fp = frames_dir.join(frame_file_name(id, "ppm"));
            let frame = read_ppm(&read_file(&fp)?).map_err(|e| Error::Dataset(format!("{}: {e}", fp.display())))?;
            Ok((id, frame))
        })
        .collect()
}

/// Every video under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<VideoSequence>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut videos = Vec::new();
    for p in sorted_entries(root)? {
        if p.is_dir() {
            videos.push(load_video_dir(&p)?);
        }
    }
    if videos.is_empty() {
        return Err(Error::Dataset(format!("empty dataset at {}", root.display())));
    }
    Ok(videos)
}
