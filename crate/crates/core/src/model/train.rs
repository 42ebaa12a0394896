//! Combined objective `L = L_bce + L_cl` and plain SGD.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{forward_on, params_on, ModelOptions, ModelParams};
use crate::contrastive::{
    batches_from_regions, downsample_mask, infonce_loss, invert_mask, region_mae, ContrastiveBatch, Polarity,
    RegionFeature,
};
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{bce_loss, GradTape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_videos: usize,
    pub frames_per_video: usize,
    pub steps: usize,
    pub tau: f64,
    pub k_pos: usize,
    pub k_neg: usize,
    pub seed: u64,
    /// Attention modules on (off replaces gated attention features by zeros).
    pub attention: bool,
    /// Contrastive term on (off trains on `L_bce` alone).
    pub contrastive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_videos: 2,
            frames_per_video: 4,
            steps: 2000,
            tau: 0.1,
            k_pos: 4,
            k_neg: 4,
            seed: 1,
            attention: true,
            contrastive: true,
        }
    }
}

impl TrainConfig {
    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            attention: self.attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_videos", self.batch_videos),
            ("frames_per_video", self.frames_per_video),
            ("k_pos", self.k_pos),
            ("k_neg", self.k_neg),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning_rate must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// One training frame with its ground-truth mask.
#[derive(Debug, Clone, Copy)]
pub struct FrameSample<'a> {
    pub video_id: &'a str,
    pub frame_idx: usize,
    pub image: &'a Tensor,
    pub mask: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub bce: f64,
    pub cl: f64,
    /// Number of anchors that contributed to `cl`.
    pub anchors: usize,
}

/// Mean per-frame BCE plus mean per-anchor InfoNCE; `cl = 0` without batches.
pub fn total_loss(
    saliency: &[Tensor],
    gt_masks: &[Tensor],
    batches: &[ContrastiveBatch],
    tau: f64,
) -> Result<LossRecord> {
    if saliency.is_empty() || saliency.len() != gt_masks.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching nonempty prediction and mask lists, got {} and {}",
            saliency.len(),
            gt_masks.len()
        )));
    }
    let mut bce = 0.0;
    for (p, g) in saliency.iter().zip(gt_masks) {
        bce += bce_loss(p, g)?;
    }
    bce /= saliency.len() as f64;
    let mut cl = 0.0;
    for b in batches {
        cl += infonce_loss(b, tau)?;
    }
    if !batches.is_empty() {
        cl /= batches.len() as f64;
    }
    Ok(LossRecord {
        total: bce + cl,
        bce,
        cl,
        anchors: batches.len(),
    })
}

struct RegionSlot {
    var: Var,
    feature: RegionFeature,
}

struct FramePass {
    tape: GradTape,
    bce: Var,
    bce_value: f64,
    regions: Vec<RegionSlot>,
}

fn frame_pass(sample: &FrameSample<'_>, params: &ModelParams, cfg: &TrainConfig) -> Result<FramePass> {
    let mut tape = GradTape::new();
    let vars = params_on(&mut tape, params);
    let input = tape.leaf(sample.image.clone());
    let out = forward_on(&mut tape, &vars, input, cfg.model_options())?;
    let bce = tape.bce(out.saliency, sample.mask)?;
    let bce_value = tape.value(bce).data()[0];

    let mut regions = Vec::new();
    if cfg.contrastive {
        let [h, w, _] = tape.value(out.feature).dims3("features")?;
        let small = downsample_mask(sample.mask, h, w)?;
        let pred = tape.value(out.saliency).clone();
        let sides = [
            (Polarity::Foreground, small.clone(), sample.mask.clone()),
            (Polarity::Background, invert_mask(&small), invert_mask(sample.mask)),
        ];
        for (polarity, small_region, full_region) in sides {
            if small_region.sum() == 0.0 || full_region.sum() == 0.0 {
                continue;
            }
            let pooled = tape.masked_avg_pool(out.feature, &small_region)?;
            // A region whose pooled feature is exactly zero has no direction.
            if tape.value(pooled).data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let var = tape.l2_normalize(pooled)?;
            let feature = RegionFeature {
                video_id: sample.video_id.to_string(),
                frame_idx: sample.frame_idx,
                polarity,
                vec: tape.value(var).clone(),
                mining_score: region_mae(&pred, sample.mask, &full_region)?,
            };
            regions.push(RegionSlot { var, feature });
        }
    }
    Ok(FramePass {
        tape,
        bce,
        bce_value,
        regions,
    })
}

/// Loss and parameter gradients for one minibatch; no parameter update.
pub fn compute_gradients(
    batch: &[FrameSample<'_>],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, LossRecord)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for s in batch {
        if !seen.insert((s.video_id, s.frame_idx)) {
            return Err(Error::InvalidArgument(format!(
                "frame {}#{} appears twice in the minibatch",
                s.video_id, s.frame_idx
            )));
        }
    }

    let passes: Vec<FramePass> = batch
        .par_iter()
        .map(|s| frame_pass(s, params, cfg))
        .collect::<Result<_>>()?;

    let bce = passes.iter().map(|p| p.bce_value).sum::<f64>() / batch.len() as f64;
    if !bce.is_finite() {
        return Err(Error::NonFinite(format!("L_bce = {bce}")));
    }

    // Contrastive term on its own tape; region vectors are its leaves.
    let all_regions: Vec<RegionFeature> = passes
        .iter()
        .flat_map(|p| p.regions.iter().map(|r| r.feature.clone()))
        .collect();
    let batches = batches_from_regions(&all_regions, cfg.k_pos, cfg.k_neg);
    let mut cl = 0.0;
    let mut region_grads: HashMap<(String, usize, Polarity), Tensor> = HashMap::new();
    if !batches.is_empty() {
        let mut tape = GradTape::new();
        let mut leaves: HashMap<(String, usize, Polarity), Var> = HashMap::new();
        let mut leaf_for = |tape: &mut GradTape, r: &RegionFeature| {
            let key = (r.video_id.clone(), r.frame_idx, r.polarity);
            *leaves.entry(key).or_insert_with(|| tape.leaf(r.vec.clone()))
        };
        let mut losses = Vec::with_capacity(batches.len());
        for b in &batches {
            let a = leaf_for(&mut tape, &b.anchor);
            let pos: Vec<Var> = b.positives.iter().map(|r| leaf_for(&mut tape, r)).collect();
            let neg: Vec<Var> = b.negatives.iter().map(|r| leaf_for(&mut tape, r)).collect();
            losses.push(tape.infonce(a, &pos, &neg, cfg.tau)?);
        }
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = tape.add(acc, l)?;
        }
        let mean = tape.scale(acc, 1.0 / batches.len() as f64);
        cl = tape.value(mean).data()[0];
        if !cl.is_finite() {
            return Err(Error::NonFinite(format!("L_cl = {cl}")));
        }
        let grads = tape.backward(mean)?;
        for (key, var) in leaves {
            if let Some(g) = grads.grad(var) {
                region_grads.insert(key, g.clone());
            }
        }
    }

    let inv_frames = 1.0 / batch.len() as f64;
    let frame_grads: Vec<Vec<(usize, Tensor)>> = passes
        .par_iter()
        .map(|p| {
            let mut seeds = vec![(p.bce, Tensor::scalar(inv_frames))];
            for r in &p.regions {
                let key = (r.feature.video_id.clone(), r.feature.frame_idx, r.feature.polarity);
                if let Some(g) = region_grads.get(&key) {
                    seeds.push((r.var, g.clone()));
                }
            }
            Ok(p.tape.backward_seeded(&seeds)?.into_param_grads())
        })
        .collect::<Result<_>>()?;

    let mut total = ModelParams::zeros(params.channels());
    let mut slots: Vec<&mut Tensor> = total.iter_mut().map(|(_, t)| t).collect();
    for grads in &frame_grads {
        for (id, g) in grads {
            for (a, b) in slots[*id].data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok((
        total,
        LossRecord {
            total: bce + cl,
            bce,
            cl,
            anchors: batches.len(),
        },
    ))
}

/// One forward/backward pass and the update `θ ← θ − lr·∇θ`.
pub fn train_step(
    batch: &[FrameSample<'_>],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, LossRecord)> {
    let (grads, record) = compute_gradients(batch, params, cfg)?;
    let lr = cfg.learning_rate;
    let mut next = params.clone();
    for ((_, p), (_, g)) in next.iter_mut().zip(grads.iter()) {
        for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
            *a -= lr * b;
        }
    }
    if !next.all_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok((next, record))
}

/// Seeded minibatch for `step`: `batch_videos` distinct videos, then
/// `frames_per_video` distinct frames of each (ascending within a video).
pub fn sample_minibatch<'a>(
    videos: &'a [VideoSequence],
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<FrameSample<'a>>> {
    if videos.len() < cfg.batch_videos {
        return Err(Error::InvalidArgument(format!(
            "need at least {} videos, have {}",
            cfg.batch_videos,
            videos.len()
        )));
    }
    let mut rng = Rng::derive(cfg.seed, 0x7261_696e_0000_0000 | step as u64);
    let mut out = Vec::with_capacity(cfg.batch_videos * cfg.frames_per_video);
    for vi in rng.choose_distinct(videos.len(), cfg.batch_videos) {
        let video = &videos[vi];
        if video.frames.len() < cfg.frames_per_video {
            return Err(Error::InvalidArgument(format!(
                "video {} has {} frames, need {}",
                video.video_id,
                video.frames.len(),
                cfg.frames_per_video
            )));
        }
        let mut frames = rng.choose_distinct(video.frames.len(), cfg.frames_per_video);
        frames.sort_unstable();
        for fi in frames {
            out.push(FrameSample {
                video_id: &video.video_id,
                frame_idx: fi,
                image: &video.frames[fi],
                mask: &video.masks[fi],
            });
        }
    }
    Ok(out)
}

/// Runs `cfg.steps` steps in place. On error `params` holds the last finite
/// state.
pub fn train(
    videos: &[VideoSequence],
    params: &mut ModelParams,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossRecord),
) -> Result<()> {
    cfg.validate()?;
    for step in 0..cfg.steps {
        let batch = sample_minibatch(videos, cfg, step)?;
        let (next, record) = train_step(&batch, params, cfg)?;
        *params = next;
        on_step(step, &record);
    }
    Ok(())
}
