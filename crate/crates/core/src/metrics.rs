//! Saliency and segmentation metrics: MAE, max F-measure, S-measure, region
//! similarity (Jaccard), and boundary F.
//!
//! S-measure follows the structure-measure construction:
//!
//! * ground truth all background: `S = 1 - mean(P)`; all foreground: `S = mean(P)`;
//! * otherwise `S = max(0, α·S_o + (1-α)·S_r)`, clamped to `[0, 1]`.
//! * `S_o = μ·O(P on G) + (1-μ)·O((1-P) on ¬G)` with `μ = |G|/(H·W)` and
//!   `O = 2x̄ / (x̄² + 1 + σ + ε)` using the sample standard deviation `σ`.
//! * `S_r` splits both maps at `(round(centroid of G) + 1)` into four blocks,
//!   scores each with an SSIM-style term, and weights blocks by area.
//!
//! Inputs are used as given; no min-max rescaling of `P` is applied.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EPS: f64 = f64::EPSILON;

/// Number of binarization thresholds `{0, 1/255, ..., 1}` for max F.
pub const F_THRESHOLDS: usize = 256;
pub const DEFAULT_BETA2: f64 = 0.3;
pub const DEFAULT_ALPHA: f64 = 0.5;

fn check(p: &Tensor, g: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    p.expect_same_shape(g, op)?;
    p.dims2(op)
}

pub fn binarize(p: &Tensor, threshold: f64) -> Tensor {
    p.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

fn is_on(v: f64) -> bool {
    v >= 0.5
}

pub fn mae(p: &Tensor, g: &Tensor) -> Result<f64> {
    check(p, g, "mae")?;
    let total: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / p.len() as f64)
}

/// Largest `k` in `0..=255` with `k / 255 <= v`, or `None` below zero.
fn threshold_bin(v: f64) -> Option<usize> {
    if !(v >= 0.0) {
        return None;
    }
    let mut k = ((v * 255.0).floor() as i64).clamp(0, 255) as usize;
    while k < 255 && (k + 1) as f64 / 255.0 <= v {
        k += 1;
    }
    while k > 0 && k as f64 / 255.0 > v {
        k -= 1;
    }
    Some(k)
}

pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> f64 {
    if precision == 0.0 && recall == 0.0 {
        return 0.0;
    }
    (1.0 + beta2) * precision * recall / (beta2 * precision + recall)
}

/// Maximum F_β over the 256 thresholds with predicate `P >= t`. `None` when
/// the ground truth has no foreground.
pub fn max_f_measure(p: &Tensor, g: &Tensor, beta2: f64) -> Result<Option<f64>> {
    check(p, g, "max_f_measure")?;
    let mut hist_fg = [0usize; F_THRESHOLDS];
    let mut hist_all = [0usize; F_THRESHOLDS];
    let mut positives = 0usize;
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        let fg = is_on(gv);
        positives += fg as usize;
        if let Some(k) = threshold_bin(pv) {
            hist_all[k] += 1;
            hist_fg[k] += fg as usize;
        }
    }
    if positives == 0 {
        return Ok(None);
    }
    // Pixels passing threshold k are those whose bin is >= k.
    let (mut tp, mut predicted) = (0usize, 0usize);
    let mut best: f64 = 0.0;
    for k in (0..F_THRESHOLDS).rev() {
        tp += hist_fg[k];
        predicted += hist_all[k];
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = tp as f64 / positives as f64;
        best = best.max(f_beta(precision, recall, beta2));
    }
    Ok(Some(best))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n.max(2) - 1) as f64).sqrt())
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// Object-aware term.
pub fn s_object(p: &Tensor, g: &Tensor) -> Result<f64> {
    check(p, g, "s_object")?;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        if is_on(gv) {
            fg.push(pv);
        } else {
            bg.push(1.0 - pv);
        }
    }
    let u = fg.len() as f64 / p.len() as f64;
    Ok(u * object_score(&fg) + (1.0 - u) * object_score(&bg))
}

fn block_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    let denom = (n.max(2) - 1) as f64;
    let x = p.iter().sum::<f64>() / n as f64;
    let y = g.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        sxx += (a - x) * (a - x);
        syy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point `(row, col)`: one plus the rounded foreground centroid, or the
/// rounded image center when the ground truth is empty.
fn split_point(g: &Tensor, h: usize, w: usize) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if is_on(g.data()[y * w + x]) {
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return ((h as f64 / 2.0).round() as usize, (w as f64 / 2.0).round() as usize);
    }
    let cy = (sy / n as f64).round() as usize + 1;
    let cx = (sx / n as f64).round() as usize + 1;
    (cy.min(h), cx.min(w))
}

/// Region-aware term.
pub fn s_region(p: &Tensor, g: &Tensor) -> Result<f64> {
    let [h, w] = check(p, g, "s_region")?;
    let (sy, sx) = split_point(g, h, w);
    let area = (h * w) as f64;
    let blocks = [(0, sy, 0, sx), (0, sy, sx, w), (sy, h, 0, sx), (sy, h, sx, w)];
    let mut total = 0.0;
    for (y0, y1, x0, x1) in blocks {
        if y1 <= y0 || x1 <= x0 {
            continue;
        }
        let mut pb = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut gb = Vec::with_capacity(pb.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                pb.push(p.data()[y * w + x]);
                gb.push(if is_on(g.data()[y * w + x]) { 1.0 } else { 0.0 });
            }
        }
        let weight = pb.len() as f64 / area;
        total += weight * block_ssim(&pb, &gb);
    }
    Ok(total)
}

pub fn s_measure(p: &Tensor, g: &Tensor, alpha: f64) -> Result<f64> {
    check(p, g, "s_measure")?;
    let fg_frac = g.data().iter().filter(|&&v| is_on(v)).count() as f64 / g.len() as f64;
    let s = if fg_frac == 0.0 {
        1.0 - p.mean()
    } else if fg_frac == 1.0 {
        p.mean()
    } else {
        alpha * s_object(p, g)? + (1.0 - alpha) * s_region(p, g)?
    };
    Ok(s.clamp(0.0, 1.0))
}

/// `|P ∩ G| / |P ∪ G|`, 1 when both are empty.
pub fn jaccard(p_bin: &Tensor, g: &Tensor) -> Result<f64> {
    check(p_bin, g, "jaccard")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in p_bin.data().iter().zip(g.data()) {
        let (a, b) = (is_on(a), is_on(b));
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour in the background or outside.
pub fn boundary_pixels(m: &Tensor) -> Result<Vec<bool>> {
    let [h, w] = m.dims2("boundary_pixels")?;
    let on = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && is_on(m.data()[y as usize * w + x as usize])
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    Ok(out)
}

/// Marks every pixel within Chebyshev distance `tol` of a set pixel.
fn dilate(mask: &[bool], h: usize, w: usize, tol: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(tol)..(y + tol + 1).min(h) {
                for xx in x.saturating_sub(tol)..(x + tol + 1).min(w) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

/// Default matching tolerance `max(1, round(0.0075 · diagonal))`.
pub fn default_boundary_tolerance(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    ((0.0075 * diag).round() as usize).max(1)
}

pub fn boundary_f(p_bin: &Tensor, g: &Tensor, tol: usize) -> Result<f64> {
    let [h, w] = check(p_bin, g, "boundary_f")?;
    if tol == 0 {
        return Err(Error::InvalidArgument("boundary tolerance must be at least 1".into()));
    }
    let pb = boundary_pixels(p_bin)?;
    let gb = boundary_pixels(g)?;
    let (np, ng) = (pb.iter().filter(|&&b| b).count(), gb.iter().filter(|&&b| b).count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let near_g = dilate(&gb, h, w, tol);
    let near_p = dilate(&pb, h, w, tol);
    let matched_p = pb.iter().zip(&near_g).filter(|(&b, &n)| b && n).count();
    let matched_g = gb.iter().zip(&near_p).filter(|(&b, &n)| b && n).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame_id: String,
    /// `None` for frames without ground-truth foreground.
    pub max_f: Option<f64>,
    pub s: f64,
    pub mae: f64,
    pub j: f64,
    pub boundary_f: f64,
}

/// Scores one saliency map against a binary mask. `J` and boundary F use the
/// prediction binarized at 0.5.
pub fn evaluate_frame(frame_id: &str, p: &Tensor, g: &Tensor) -> Result<FrameMetrics> {
    let [h, w] = check(p, g, "evaluate_frame")?;
    let p_bin = binarize(p, 0.5);
    Ok(FrameMetrics {
        frame_id: frame_id.to_string(),
        max_f: max_f_measure(p, g, DEFAULT_BETA2)?,
        s: s_measure(p, g, DEFAULT_ALPHA)?,
        mae: mae(p, g)?,
        j: jaccard(&p_bin, g)?,
        boundary_f: boundary_f(&p_bin, g, default_boundary_tolerance(h, w))?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub max_f: f64,
    pub s: f64,
    pub mae: f64,
    pub j: f64,
    pub boundary_f: f64,
    pub frames: usize,
    /// Frames left out of the max-F mean for lack of foreground.
    pub excluded_from_max_f: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
}

impl EvalReport {
    /// Unweighted means in frame order.
    pub fn aggregate(&self) -> Aggregate {
        let n = self.frames.len().max(1) as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| self.frames.iter().map(f).sum::<f64>() / n;
        let with_f: Vec<f64> = self.frames.iter().filter_map(|f| f.max_f).collect();
        Aggregate {
            max_f: if with_f.is_empty() {
                0.0
            } else {
                with_f.iter().sum::<f64>() / with_f.len() as f64
            },
            s: mean(|f| f.s),
            mae: mean(|f| f.mae),
            j: mean(|f| f.j),
            boundary_f: mean(|f| f.boundary_f),
            frames: self.frames.len(),
            excluded_from_max_f: self.frames.len() - with_f.len(),
        }
    }

    /// `frame_id<TAB>maxF<TAB>S<TAB>MAE<TAB>J<TAB>boundaryF` per frame; `NA`
    /// marks a max-F that is undefined.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            let max_f = f.max_f.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                f.frame_id, max_f, f.s, f.mae, f.j, f.boundary_f
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let a = self.aggregate();
        let mut out = String::new();
        out.push_str("metric      mean\n");
        out.push_str("----------  --------\n");
        for (name, v) in [
            ("maxF", a.max_f),
            ("S", a.s),
            ("MAE", a.mae),
            ("J", a.j),
            ("boundaryF", a.boundary_f),
        ] {
            out.push_str(&format!("{name:<10}  {v:.6}\n"));
        }
        out.push_str(&format!("frames      {}\n", a.frames));
        if a.excluded_from_max_f > 0 {
            out.push_str(&format!("maxF excludes {} frames with empty ground truth\n", a.excluded_from_max_f));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Tensor {
        let mut t = Tensor::zeros(&[h, w]);
        for y in y0..y1 {
            for x in x0..x1 {
                t.data_mut()[y * w + x] = 1.0;
            }
        }
        t
    }

    #[test]
    fn mae_cases() {
        let g = rect(4, 4, 0, 2, 0, 4);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        assert_eq!(mae(&g.map(|v| 1.0 - v), &g).unwrap(), 1.0);
        assert_eq!(mae(&Tensor::full(&[4, 4], 0.5), &g).unwrap(), 0.5);
        assert!(mae(&Tensor::zeros(&[2, 2]), &g).is_err());
    }

    #[test]
    fn max_f_cases() {
        let g = rect(4, 4, 0, 4, 0, 2);
        assert_eq!(max_f_measure(&g, &g, 0.3).unwrap(), Some(1.0));
        let half = Tensor::full(&[4, 4], 0.5);
        let f = max_f_measure(&half, &g, 0.3).unwrap().unwrap();
        assert!((f - 0.65 / 1.15).abs() < 1e-12, "{f}");
        assert!((f_beta(0.5, 0.5, 0.3) - 0.5).abs() < 1e-15);
        assert_eq!(max_f_measure(&half, &Tensor::zeros(&[4, 4]), 0.3).unwrap(), None);
    }

    #[test]
    fn threshold_bins_are_exact() {
        for k in 0..256usize {
            assert_eq!(threshold_bin(k as f64 / 255.0), Some(k));
        }
        assert_eq!(threshold_bin(-0.1), None);
        assert_eq!(threshold_bin(2.0), Some(255));
    }

    #[test]
    fn s_measure_cases() {
        let g = rect(16, 16, 4, 10, 3, 12);
        let perfect = s_measure(&g, &g, 0.5).unwrap();
        assert!(perfect >= 0.97, "{perfect}");
        let constant = Tensor::full(&[16, 16], g.mean());
        assert!(s_measure(&constant, &g, 0.5).unwrap() < perfect);

        let p = Tensor::random_uniform(&[16, 16], 0.0, 1.0, &mut Rng::new(3));
        assert_eq!(s_measure(&p, &g, 1.0).unwrap(), s_object(&p, &g).unwrap().clamp(0.0, 1.0));
        assert_eq!(s_measure(&p, &g, 0.0).unwrap(), s_region(&p, &g).unwrap().clamp(0.0, 1.0));
    }

    #[test]
    fn s_measure_degenerate_ground_truth() {
        let p = Tensor::full(&[4, 4], 0.25);
        assert_eq!(s_measure(&p, &Tensor::zeros(&[4, 4]), 0.5).unwrap(), 0.75);
        assert_eq!(s_measure(&p, &Tensor::full(&[4, 4], 1.0), 0.5).unwrap(), 0.25);
    }

    #[test]
    fn jaccard_cases() {
        let g = rect(4, 4, 0, 4, 0, 2);
        assert_eq!(jaccard(&g, &g).unwrap(), 1.0);
        assert_eq!(jaccard(&rect(4, 4, 0, 4, 2, 4), &g).unwrap(), 0.0);
        let top = rect(4, 4, 0, 2, 0, 4);
        assert!((jaccard(&top, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[4, 4])).unwrap(), 1.0);
    }

    #[test]
    fn boundary_cases() {
        let g = rect(16, 16, 6, 10, 6, 10);
        assert_eq!(boundary_f(&g, &g, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&Tensor::zeros(&[16, 16]), &g, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[4, 4]), 1).unwrap(), 1.0);
        // 4×4 square: 12 boundary pixels.
        assert_eq!(boundary_pixels(&g).unwrap().iter().filter(|&&b| b).count(), 12);
        assert_eq!(default_boundary_tolerance(64, 64), 1);
        assert_eq!(default_boundary_tolerance(480, 854), 7);
    }

    #[test]
    fn boundary_shifted_square_against_brute_force() {
        let g = rect(16, 16, 6, 10, 6, 10);
        let p = rect(16, 16, 6, 10, 7, 11);
        let tol = 1;
        let f = boundary_f(&p, &g, tol).unwrap();

        // Brute force: nearest boundary pixel by exhaustive search.
        let pts = |m: &Tensor| -> Vec<(i64, i64)> {
            let b = boundary_pixels(m).unwrap();
            (0..256).filter(|&i| b[i]).map(|i| ((i / 16) as i64, (i % 16) as i64)).collect()
        };
        let (pp, gp) = (pts(&p), pts(&g));
        let within = |a: &[(i64, i64)], b: &[(i64, i64)]| {
            a.iter()
                .filter(|(y, x)| b.iter().any(|(v, u)| (y - v).abs().max((x - u).abs()) <= tol as i64))
                .count() as f64
                / a.len() as f64
        };
        let (pr, rc) = (within(&pp, &gp), within(&gp, &pp));
        let expect = 2.0 * pr * rc / (pr + rc);
        assert!((f - expect).abs() < 1e-15);
        // Every boundary pixel of a 1-px shift is within tolerance 1.
        assert_eq!(f, 1.0);
        assert!(boundary_f(&rect(16, 16, 6, 10, 9, 13), &g, 1).unwrap() < 1.0);
    }

    #[test]
    fn report_lines_format() {
        let g = rect(8, 8, 2, 6, 2, 6);
        let report = EvalReport {
            frames: vec![evaluate_frame("v/00000", &g, &g).unwrap()],
        };
        let line = report.to_lines();
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[0], "v/00000");
        assert_eq!(fields[1], "1.000000");
        assert_eq!(fields[3], "0.000000");
        let agg = report.aggregate();
        assert_eq!((agg.max_f, agg.mae, agg.j, agg.boundary_f), (1.0, 0.0, 1.0, 1.0));
    }
}
