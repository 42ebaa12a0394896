use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use salattn::attention::{count_flops, NonlocalVariant};
use salattn::data::{
    frame_file_name, generate_video, load_dataset, load_frames, read_pgm, save_video, write_atomic, write_pgm,
};
use salattn::gradsuite::{run_suite, SuiteOptions};
use salattn::metrics::{evaluate_frame, EvalReport};
use salattn::model::{forward, load_checkpoint, save_checkpoint, train, ModelOptions, ModelParams};
use salattn::{Rng, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn flush(out: &mut dyn Write) -> Result<()> {
    out.flush().map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn dir_has_entries(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(CliError::io(path, e)),
    }
}

pub fn video_id(index: usize) -> String {
    format!("video{index:02}")
}

/// Writes `synth_videos` videos under `dataset_root`. With `force`, existing
/// video directories there are replaced.
pub fn cmd_synth(cfg: &RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let root = &cfg.dataset_root;
    if dir_has_entries(root)? {
        if !force {
            return Err(CliError::Exists { path: root.clone() });
        }
        for entry in fs::read_dir(root).map_err(|e| CliError::io(root, e))? {
            let path = entry.map_err(|e| CliError::io(root, e))?.path();
            if path.is_dir() && path.join("frames").is_dir() {
                fs::remove_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
            }
        }
    }
    let videos: Vec<_> = (0..cfg.synth_videos)
        .into_par_iter()
        .map(|i| {
            let seq = generate_video(&video_id(i), &cfg.synth_config(i))?;
            save_video(root, &seq)?;
            Ok::<_, CliError>(seq)
        })
        .collect::<Result<_>>()?;
    for v in &videos {
        emit(out, format!("{}\t{} frames", v.video_id, v.len()))?;
    }
    emit(out, format!("wrote {} videos to {}", videos.len(), root.display()))
}

pub struct TrainSummary {
    pub param_count: usize,
    pub steps_run: usize,
    pub first: Option<(f64, f64, f64)>,
    pub last: Option<(f64, f64, f64)>,
}

/// Trains on all but the last `holdout_videos` videos; writes the checkpoint
/// and `output_dir/loss.csv`. Both are written even when a step fails, holding
/// the last finite state.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainSummary> {
    let mut videos = load_dataset(&cfg.dataset_root)?;
    for v in &videos {
        if let Some(f) = v.frames.first() {
            if f.shape() != [cfg.height, cfg.width, 3] {
                return Err(CliError::ConfigValue(format!(
                    "video {} has frames {:?}, config expects {}x{}",
                    v.video_id,
                    f.shape(),
                    cfg.height,
                    cfg.width
                )));
            }
        }
    }
    if cfg.holdout_videos >= videos.len() {
        return Err(CliError::ConfigValue(format!(
            "holdout_videos = {} leaves no training videos out of {}",
            cfg.holdout_videos,
            videos.len()
        )));
    }
    videos.truncate(videos.len() - cfg.holdout_videos);
    let tcfg = cfg.train_config();
    let mut params = ModelParams::init(cfg.channels, cfg.seed);
    emit(out, format!("parameters: {}", params.param_count()))?;
    emit(
        out,
        format!(
            "training on {} videos: {}",
            videos.len(),
            videos.iter().map(|v| v.video_id.as_str()).collect::<Vec<_>>().join(",")
        ),
    )?;

    let mut log = String::from("step,L,L_bce,L_cl\n");
    let mut summary = TrainSummary {
        param_count: params.param_count(),
        steps_run: 0,
        first: None,
        last: None,
    };
    let every = (cfg.steps / 20).max(1);
    let mut write_err = None;
    let result = train(&videos, &mut params, &tcfg, |step, r| {
        log.push_str(&format!("{step},{},{},{}\n", r.total, r.bce, r.cl));
        let triple = (r.total, r.bce, r.cl);
        summary.first.get_or_insert(triple);
        summary.last = Some(triple);
        summary.steps_run = step + 1;
        if (step % every == 0 || step + 1 == cfg.steps) && write_err.is_none() {
            let line = format!(
                "step {step}/{} L={:.6} L_bce={:.6} L_cl={:.6}",
                cfg.steps, r.total, r.bce, r.cl
            );
            write_err = emit(out, line).and_then(|_| flush(out)).err();
        }
    });
    save_checkpoint(&params, &cfg.checkpoint_path)?;
    write_atomic(&cfg.output_dir.join("loss.csv"), log.as_bytes())?;
    result?;
    if let Some(e) = write_err {
        return Err(e);
    }
    emit(out, format!("checkpoint written to {}", cfg.checkpoint_path.display()))?;
    Ok(summary)
}

/// Saliency PGMs for every frame of `video_dir`, written to
/// `output_dir/<video_id>/NNNNN.pgm`.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, video_dir: &Path, out: &mut dyn Write) -> Result<PathBuf> {
    let params = load_checkpoint(checkpoint, cfg.channels)?;
    let frames = load_frames(video_dir)?;
    let name = video_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let dest = cfg.output_dir.join(&name);
    let opts = ModelOptions {
        attention: cfg.use_attention,
    };
    if let Some((_, first)) = frames.first() {
        if let Some((_, bad)) = frames.iter().find(|(_, f)| f.shape() != first.shape()) {
            return Err(CliError::Core(salattn::Error::ShapeMismatch {
                op: "infer",
                lhs: first.shape().to_vec(),
                rhs: bad.shape().to_vec(),
            }));
        }
    }
    let maps: Vec<Tensor> = frames
        .par_iter()
        .map(|(_, f)| forward(f, &params, opts).map(|o| o.saliency))
        .collect::<salattn::Result<_>>()?;
    for ((idx, _), map) in frames.iter().zip(&maps) {
        write_atomic(&dest.join(frame_file_name(*idx, "pgm")), &write_pgm(map)?)?;
    }
    emit(out, format!("wrote {} maps to {}", maps.len(), dest.display()))?;
    Ok(dest)
}

/// Every `*.pgm` below `dir`, keyed by relative path with any `masks`
/// component removed.
fn pgm_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    fn walk(base: &Path, dir: &Path, acc: &mut BTreeMap<String, PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
            let path = entry.map_err(|e| CliError::io(dir, e))?.path();
            if path.is_dir() {
                walk(base, &path, acc)?;
            } else if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
                let rel = path.strip_prefix(base).expect("walked below base");
                let key: Vec<String> = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .filter(|c| c != "masks")
                    .collect();
                acc.insert(key.join("/"), path.clone());
            }
        }
        Ok(())
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc)?;
    Ok(acc)
}

fn read_map(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    read_pgm(&bytes).map_err(|e| CliError::Core(salattn::Error::Dataset(format!("{}: {e}", path.display()))))
}

/// Scores predicted PGMs against ground-truth masks (binarized at 0.5);
/// writes `metrics.tsv` and `metrics.txt` to `dest`.
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, dest: &Path, out: &mut dyn Write) -> Result<EvalReport> {
    let preds = pgm_files(pred_dir)?;
    let gts = pgm_files(gt_dir)?;
    let missing_pred: Vec<&String> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
    let missing_gt: Vec<&String> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let mut parts = Vec::new();
        if !missing_pred.is_empty() {
            parts.push(format!("no prediction for {:?}", missing_pred));
        }
        if !missing_gt.is_empty() {
            parts.push(format!("no ground truth for {:?}", missing_gt));
        }
        return Err(CliError::Unmatched(parts.join("; ")));
    }
    if gts.is_empty() {
        return Err(CliError::Unmatched(format!("no .pgm files under {}", gt_dir.display())));
    }
    let prefix = gt_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let frames = gts
        .par_iter()
        .map(|(key, gt_path)| {
            let gt = read_map(gt_path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            let pred = read_map(&preds[key])?;
            let id = format!("{prefix}/{}", key.trim_end_matches(".pgm"));
            Ok(evaluate_frame(&id, &pred, &gt)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport { frames };
    let agg = report.aggregate();
    if agg.excluded_from_max_f > 0 {
        eprintln!(
            "warning: {} frames have empty ground truth and are excluded from maxF",
            agg.excluded_from_max_f
        );
    }
    write_atomic(&dest.join("metrics.tsv"), report.to_lines().as_bytes())?;
    let table = report.to_table();
    write_atomic(&dest.join("metrics.txt"), table.as_bytes())?;
    out.write_all(table.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(report)
}

/// `1234567` -> `1,234,567`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub struct BenchRow {
    pub variant: NonlocalVariant,
    pub multiplies: u64,
    pub median_secs: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Analytic counts and median wall time of each non-local variant on a random
/// `(h, w, c)` input.
pub fn cmd_bench(h: usize, w: usize, c: usize, repeats: usize, seed: u64, out: &mut dyn Write) -> Result<Vec<BenchRow>> {
    if h == 0 || w == 0 || c == 0 || repeats == 0 {
        return Err(CliError::Bench("extents and repeats must be positive".into()));
    }
    let x = Tensor::random_uniform(&[h, w, c], -1.0, 1.0, &mut Rng::new(seed));
    let reference = NonlocalVariant::LightweightReordered.evaluate(&x)?;
    for v in [NonlocalVariant::Naive, NonlocalVariant::LightweightUnordered] {
        let diff = v.evaluate(&x)?.max_abs_diff(&reference);
        if !(diff <= 1e-10) {
            return Err(CliError::Bench(format!(
                "{} disagrees with {} by {diff:e}",
                v.name(),
                NonlocalVariant::LightweightReordered.name()
            )));
        }
    }
    let mut rows = Vec::new();
    for v in NonlocalVariant::ALL {
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            let y = v.evaluate(&x)?;
            times.push(t.elapsed().as_secs_f64());
            std::hint::black_box(y);
        }
        rows.push(BenchRow {
            variant: v,
            multiplies: count_flops(v, h as u64, w as u64, c as u64),
            median_secs: median(times),
        });
    }
    emit(out, format!("input {h}x{w}x{c} (N = {}), {repeats} repeats", h * w))?;
    emit(out, format!("{:<24}{:>16}{:>14}", "variant", "multiplies", "median_s"))?;
    for r in &rows {
        emit(
            out,
            format!("{:<24}{:>16}{:>14.6}", r.variant.name(), group_thousands(r.multiplies), r.median_secs),
        )?;
    }
    let naive = count_flops(NonlocalVariant::Naive, h as u64, w as u64, c as u64);
    let fast = count_flops(NonlocalVariant::LightweightReordered, h as u64, w as u64, c as u64);
    emit(out, format!("ratio naive/reordered: {:.2}", naive as f64 / fast as f64))?;
    Ok(rows)
}

pub fn cmd_gradcheck(opts: SuiteOptions, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let rows = run_suite(opts)?;
    emit(out, format!("{:<24}{:>14}{:>12}  result", "check", "max_rel_err", "tolerance"))?;
    for r in &rows {
        emit(
            out,
            format!(
                "{:<24}{:>14.3e}{:>12.0e}  {}",
                r.name,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            ),
        )?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    emit(out, format!("{} checks in {:.1}s", rows.len(), start.elapsed().as_secs_f64()))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(format!("{} exceeded tolerance", failed.join(", "))))
    }
}
