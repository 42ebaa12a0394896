//! Region pooling, hard-sample mining, and the InfoNCE objective over
//! foreground/background region features within a video.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{masked_avg_pool, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Foreground,
    Background,
}

/// Pooled, unit-norm channel vector for one region of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub video_id: String,
    pub frame_idx: usize,
    pub polarity: Polarity,
    pub vec: Tensor,
    /// Within-region MAE between prediction and ground truth, in `[0, 1]`.
    pub mining_score: f64,
}

impl RegionFeature {
    pub fn key(&self) -> (&str, usize, Polarity) {
        (&self.video_id, self.frame_idx, self.polarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchor: RegionFeature,
    pub positives: Vec<RegionFeature>,
    pub negatives: Vec<RegionFeature>,
}

impl ContrastiveBatch {
    pub fn new(anchor: RegionFeature, positives: Vec<RegionFeature>, negatives: Vec<RegionFeature>) -> Result<Self> {
        if anchor.polarity != Polarity::Foreground {
            return Err(Error::InvalidArgument("anchor must be a foreground region".into()));
        }
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::InvalidArgument("positives and negatives must be nonempty".into()));
        }
        for p in &positives {
            if p.polarity != Polarity::Foreground || p.video_id != anchor.video_id || p.frame_idx == anchor.frame_idx {
                return Err(Error::InvalidArgument(format!(
                    "positive from {}#{} is not a foreground region of another frame of {}",
                    p.video_id, p.frame_idx, anchor.video_id
                )));
            }
        }
        for n in &negatives {
            if n.polarity != Polarity::Background || n.video_id != anchor.video_id {
                return Err(Error::InvalidArgument(format!(
                    "negative from {}#{} is not a background region of {}",
                    n.video_id, n.frame_idx, anchor.video_id
                )));
            }
        }
        Ok(Self {
            anchor,
            positives,
            negatives,
        })
    }
}

/// Nearest-neighbour resampling of a binary mask to `(h, w)`; output pixel `i`
/// reads source pixel `floor((i + 0.5) * H / h)`.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [mh, mw] = mask.dims2("downsample_mask")?;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * mh as f64 / h as f64) as usize).min(mh - 1);
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * mw as f64 / w as f64) as usize).min(mw - 1);
            out.push(mask.data()[sy * mw + sx]);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// `Σ region·|pred − gt| / Σ region`.
pub fn region_mae(pred: &Tensor, gt: &Tensor, region: &Tensor) -> Result<f64> {
    pred.expect_same_shape(gt, "region_mae")?;
    pred.expect_same_shape(region, "region_mae")?;
    let total = region.sum();
    if total <= 0.0 {
        return Err(Error::EmptyRegion);
    }
    let err: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(region.data())
        .map(|((p, g), r)| r * (p - g).abs())
        .sum();
    Ok(err / total)
}

pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::NonFinite(format!("cannot normalize vector with norm {norm}")));
    }
    Ok(v.map(|x| x / norm))
}

/// Foreground and background features of one frame; a side is `None` when its
/// region is empty at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPair {
    pub fg: Option<RegionFeature>,
    pub bg: Option<RegionFeature>,
}

/// Complement of a binary mask.
pub fn invert_mask(mask: &Tensor) -> Tensor {
    mask.map(|m| 1.0 - m)
}

/// Pools `feat` over the foreground and the background of `mask` (given at
/// image resolution) and scores each side by its within-region MAE.
pub fn extract_region_features(
    video_id: &str,
    frame_idx: usize,
    feat: &Tensor,
    mask: &Tensor,
    pred: &Tensor,
) -> Result<RegionPair> {
    let [h, w, _] = feat.dims3("extract_region_features")?;
    let small = downsample_mask(mask, h, w)?;
    let inverse_small = invert_mask(&small);
    let inverse = invert_mask(mask);
    let build = |polarity, small: &Tensor, full: &Tensor| -> Result<Option<RegionFeature>> {
        match masked_avg_pool(feat, small) {
            Ok(pooled) => Ok(Some(RegionFeature {
                video_id: video_id.to_string(),
                frame_idx,
                polarity,
                vec: l2_normalize(&pooled)?,
                mining_score: region_mae(pred, mask, full)?,
            })),
            Err(Error::EmptyRegion) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(RegionPair {
        fg: build(Polarity::Foreground, &small, mask)?,
        bg: build(Polarity::Background, &inverse_small, &inverse)?,
    })
}

fn mining_order(a: &RegionFeature, b: &RegionFeature) -> Ordering {
    b.mining_score
        .total_cmp(&a.mining_score)
        .then(a.frame_idx.cmp(&b.frame_idx))
}

/// The `k` candidates with the highest mining score; ties go to the lower
/// frame index.
pub fn mine_hard_samples(candidates: &[RegionFeature], k: usize) -> Vec<RegionFeature> {
    let mut sorted: Vec<&RegionFeature> = candidates.iter().collect();
    sorted.sort_by(|a, b| mining_order(a, b));
    sorted.into_iter().take(k).cloned().collect()
}

fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "infonce")?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct Logits {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

fn logits(anchor: &Tensor, pos: &[&Tensor], neg: &[&Tensor], tau: f64) -> Result<Logits> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if pos.is_empty() {
        return Err(Error::InvalidArgument("infonce needs at least one positive".into()));
    }
    Ok(Logits {
        pos: pos.iter().map(|p| dot(anchor, p).map(|d| d / tau)).collect::<Result<_>>()?,
        neg: neg.iter().map(|n| dot(anchor, n).map(|d| d / tau)).collect::<Result<_>>()?,
    })
}

/// `-log(Σ₊ e^{u·u₊/τ} / (Σ₊ e^{u·u₊/τ} + Σ₋ e^{u·u₋/τ}))`, evaluated as
/// `log1p(e^{lse₋ - lse₊})` with max-shifted log-sum-exp.
pub fn infonce_value(anchor: &Tensor, pos: &[&Tensor], neg: &[&Tensor], tau: f64) -> Result<f64> {
    let l = logits(anchor, pos, neg, tau)?;
    let lse_pos = log_sum_exp(l.pos.iter().copied());
    let lse_neg = log_sum_exp(l.neg.iter().copied());
    Ok((lse_neg - lse_pos).exp().ln_1p())
}

/// Gradients of [`infonce_value`] with respect to the anchor, each positive,
/// and each negative.
pub fn infonce_grad(
    anchor: &Tensor,
    pos: &[&Tensor],
    neg: &[&Tensor],
    tau: f64,
) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>)> {
    let l = logits(anchor, pos, neg, tau)?;
    let lse_pos = log_sum_exp(l.pos.iter().copied());
    let lse_all = log_sum_exp(l.pos.iter().chain(&l.neg).copied());
    // dL/ds for each logit.
    let d_pos: Vec<f64> = l.pos.iter().map(|&s| (s - lse_all).exp() - (s - lse_pos).exp()).collect();
    let d_neg: Vec<f64> = l.neg.iter().map(|&s| (s - lse_all).exp()).collect();

    let mut da = vec![0.0; anchor.len()];
    for (coef, v) in d_pos.iter().zip(pos).chain(d_neg.iter().zip(neg)) {
        for (a, x) in da.iter_mut().zip(v.data()) {
            *a += coef * x / tau;
        }
    }
    let scaled = |coef: f64| anchor.map(|x| coef * x / tau);
    Ok((
        Tensor::new(anchor.shape().to_vec(), da)?,
        d_pos.iter().map(|&c| scaled(c)).collect(),
        d_neg.iter().map(|&c| scaled(c)).collect(),
    ))
}

pub fn infonce_loss(b: &ContrastiveBatch, tau: f64) -> Result<f64> {
    let pos: Vec<&Tensor> = b.positives.iter().map(|r| &r.vec).collect();
    let neg: Vec<&Tensor> = b.negatives.iter().map(|r| &r.vec).collect();
    infonce_value(&b.anchor.vec, &pos, &neg, tau)
}

/// Groups already-extracted regions into one batch per foreground anchor.
///
/// Positives are hard-mined from foreground regions of other frames of the
/// anchor's video; negatives from background regions of every frame of that
/// video, the anchor's own frame included.
pub fn batches_from_regions(regions: &[RegionFeature], k_pos: usize, k_neg: usize) -> Vec<ContrastiveBatch> {
    let mut out = Vec::new();
    for anchor in regions.iter().filter(|r| r.polarity == Polarity::Foreground) {
        let pos_candidates: Vec<RegionFeature> = regions
            .iter()
            .filter(|r| {
                r.polarity == Polarity::Foreground && r.video_id == anchor.video_id && r.frame_idx != anchor.frame_idx
            })
            .cloned()
            .collect();
        let neg_candidates: Vec<RegionFeature> = regions
            .iter()
            .filter(|r| r.polarity == Polarity::Background && r.video_id == anchor.video_id)
            .cloned()
            .collect();
        let positives = mine_hard_samples(&pos_candidates, k_pos);
        let negatives = mine_hard_samples(&neg_candidates, k_neg);
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        out.push(ContrastiveBatch {
            anchor: anchor.clone(),
            positives,
            negatives,
        });
    }
    out
}

/// Per-frame inputs to [`build_contrastive_batches`].
#[derive(Debug, Clone, Copy)]
pub struct FrameRegions<'a> {
    pub video_id: &'a str,
    pub frame_idx: usize,
    pub feat: &'a Tensor,
    pub mask: &'a Tensor,
    pub pred: &'a Tensor,
}

pub fn build_contrastive_batches(
    frames: &[FrameRegions<'_>],
    k_pos: usize,
    k_neg: usize,
) -> Result<Vec<ContrastiveBatch>> {
    let mut regions = Vec::new();
    for f in frames {
        let pair = extract_region_features(f.video_id, f.frame_idx, f.feat, f.mask, f.pred)?;
        regions.extend(pair.fg);
        regions.extend(pair.bg);
    }
    Ok(batches_from_regions(&regions, k_pos, k_neg))
}
