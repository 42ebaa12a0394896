use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use salattn::data::{read_pgm, write_pgm};
use salattn::model::checkpoint::decode_checkpoint;
use salattn::model::{save_checkpoint, ModelParams};
use salattn::Tensor;

fn salattn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salattn"))
        .args(args)
        .current_dir(dir)
        .env("SALATTN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

/// Asserts failure with exactly one `error[category]:` line on stderr.
fn fails_with(o: &Output, category: &str) -> String {
    assert!(!o.status.success(), "expected failure, stdout:\n{}", stdout(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error[{category}]: ")), "{err}");
    lines[0].to_string()
}

const TINY: &str = "\
# small run
synth_videos = 3
synth_frames = 4
height = 32
width = 32
channels = 8
steps = 2
frames_per_video = 2
holdout_videos = 1
";

fn workspace(cfg: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), cfg).unwrap();
    dir
}

fn count_files(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().and_then(|x| x.to_str()) == Some(ext))
                .count()
        })
        .unwrap_or(0)
}

fn write_maps(dir: &Path, maps: &[Tensor]) {
    fs::create_dir_all(dir).unwrap();
    for (i, m) in maps.iter().enumerate() {
        fs::write(dir.join(format!("{i:05}.pgm")), write_pgm(m).unwrap()).unwrap();
    }
}

fn read_masks(video: &Path) -> Vec<Tensor> {
    let mut out = Vec::new();
    for i in 0.. {
        let p = video.join("masks").join(format!("{i:05}.pgm"));
        if !p.exists() {
            break;
        }
        out.push(read_pgm(&fs::read(p).unwrap()).unwrap());
    }
    out
}

fn mean_column(tsv: &str, col: usize) -> f64 {
    let vals: Vec<f64> = tsv.lines().map(|l| l.split('\t').nth(col).unwrap().parse().unwrap()).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn synth_default_layout_and_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(salattn(dir.path(), &["synth"]));
    assert!(out.contains("wrote 10 videos"), "{out}");
    for i in 0..10 {
        let v = dir.path().join(format!("data/video{i:02}"));
        assert_eq!(count_files(&v.join("frames"), "ppm"), 16);
        assert_eq!(count_files(&v.join("masks"), "pgm"), 16);
    }
    let header = fs::read(dir.path().join("data/video00/frames/00000.ppm")).unwrap();
    assert!(header.starts_with(b"P6\n64 64\n255\n"));

    fails_with(&salattn(dir.path(), &["synth"]), "exists");
    ok(salattn(dir.path(), &["synth", "--force"]));
    assert_eq!(count_files(&dir.path().join("data/video09/masks"), "pgm"), 16);
}

#[test]
fn config_errors_are_single_line() {
    let dir = workspace("height = 63\n");
    let line = fails_with(&salattn(dir.path(), &["synth", "--config", "run.cfg"]), "config");
    assert!(line.contains("63"), "{line}");

    fs::write(dir.path().join("typo.cfg"), "stpes = 3\n").unwrap();
    let line = fails_with(&salattn(dir.path(), &["train", "--config", "typo.cfg"]), "config");
    assert!(line.contains("stpes"), "{line}");

    fails_with(&salattn(dir.path(), &["train", "--config", "missing.cfg"]), "io");
}

#[test]
fn train_writes_log_and_zero_steps_keep_init() {
    let dir = workspace(&format!("{TINY}seed = 5\n"));
    ok(salattn(dir.path(), &["synth", "--config", "run.cfg"]));
    let out = ok(salattn(dir.path(), &["train", "--config", "run.cfg"]));
    let params = ModelParams::init(8, 5);
    assert!(out.contains(&format!("parameters: {}", params.param_count())), "{out}");
    assert!(out.contains("training on 2 videos: video00,video01"), "{out}");
    let log = fs::read_to_string(dir.path().join("out/loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,L,L_bce,L_cl");
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f.len(), 4);
        assert!((f[1] - (f[2] + f[3])).abs() < 1e-12);
    }

    fs::write(dir.path().join("zero.cfg"), format!("{TINY}seed = 5\nsteps = 0\n").replace("steps = 2\n", "")).unwrap();
    ok(salattn(dir.path(), &["train", "--config", "zero.cfg"]));
    let bytes = fs::read(dir.path().join("model.ckpt")).unwrap();
    assert_eq!(decode_checkpoint(&bytes, 8).unwrap(), params);
}

#[test]
fn train_needs_enough_videos() {
    let dir = workspace(&TINY.replace("holdout_videos = 1", "holdout_videos = 2"));
    ok(salattn(dir.path(), &["synth", "--config", "run.cfg"]));
    fails_with(&salattn(dir.path(), &["train", "--config", "run.cfg"]), "argument");
    fs::remove_dir_all(dir.path().join("data")).unwrap();
    fails_with(&salattn(dir.path(), &["train", "--config", "run.cfg"]), "dataset");
}

#[test]
fn infer_outputs_and_zero_checkpoint() {
    let dir = workspace(TINY);
    ok(salattn(dir.path(), &["synth", "--config", "run.cfg"]));
    ok(salattn(dir.path(), &["train", "--config", "run.cfg"]));
    ok(salattn(dir.path(), &["infer", "--config", "run.cfg", "data/video02"]));
    let pred = dir.path().join("out/video02");
    assert_eq!(count_files(&pred, "pgm"), 4);
    let first: Vec<Vec<u8>> = (0..4).map(|i| fs::read(pred.join(format!("{i:05}.pgm"))).unwrap()).collect();
    ok(salattn(dir.path(), &["infer", "--config", "run.cfg", "data/video02"]));
    let second: Vec<Vec<u8>> = (0..4).map(|i| fs::read(pred.join(format!("{i:05}.pgm"))).unwrap()).collect();
    assert_eq!(first, second);

    save_checkpoint(&ModelParams::zeros(8), &dir.path().join("zero.ckpt")).unwrap();
    ok(salattn(dir.path(), &["infer", "--config", "run.cfg", "--checkpoint", "zero.ckpt", "data/video01"]));
    for i in 0..4 {
        let bytes = fs::read(dir.path().join(format!("out/video01/{i:05}.pgm"))).unwrap();
        let header = b"P5\n32 32\n255\n";
        assert!(bytes.starts_with(header));
        assert!(bytes[header.len()..].iter().all(|&b| b == 128));
    }

    save_checkpoint(&ModelParams::zeros(16), &dir.path().join("wide.ckpt")).unwrap();
    let line = fails_with(
        &salattn(dir.path(), &["infer", "--config", "run.cfg", "--checkpoint", "wide.ckpt", "data/video01"]),
        "checkpoint",
    );
    assert!(line.contains("stage4_w") && line.contains("coattn_w"), "{line}");
}

#[test]
fn eval_reference_cases() {
    let dir = workspace(TINY);
    ok(salattn(dir.path(), &["synth", "--config", "run.cfg"]));
    let video = dir.path().join("data/video00");
    let masks = read_masks(&video);

    write_maps(&dir.path().join("perfect"), &masks);
    let table = ok(salattn(dir.path(), &["eval", "--out", "rep_perfect", "perfect", "data/video00"]));
    assert!(table.contains("maxF"), "{table}");
    let tsv = fs::read_to_string(dir.path().join("rep_perfect/metrics.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.lines().next().unwrap().starts_with("video00/00000\t"));
    assert_eq!(mean_column(&tsv, 1), 1.0);
    assert_eq!(mean_column(&tsv, 3), 0.0);
    assert_eq!(mean_column(&tsv, 4), 1.0);
    assert_eq!(mean_column(&tsv, 5), 1.0);
    assert!(mean_column(&tsv, 2) >= 0.97);
    assert!(fs::read_to_string(dir.path().join("rep_perfect/metrics.txt")).unwrap().contains("boundaryF"));

    let inverted: Vec<Tensor> = masks.iter().map(|m| m.map(|v| 1.0 - v)).collect();
    write_maps(&dir.path().join("inverted"), &inverted);
    ok(salattn(dir.path(), &["eval", "--out", "rep_inv", "inverted", "data/video00"]));
    let tsv = fs::read_to_string(dir.path().join("rep_inv/metrics.tsv")).unwrap();
    assert_eq!(mean_column(&tsv, 4), 0.0);

    // 0.5 is not representable in 8 bits; 128/255 is the written value.
    let half: Vec<Tensor> = masks.iter().map(|m| m.map(|_| 0.5)).collect();
    write_maps(&dir.path().join("half"), &half);
    ok(salattn(dir.path(), &["eval", "--out", "rep_half", "half", "data/video00"]));
    let tsv = fs::read_to_string(dir.path().join("rep_half/metrics.tsv")).unwrap();
    let frac: Vec<f64> = masks.iter().map(|m| m.mean()).collect();
    let q = 128.0 / 255.0;
    for (line, f) in tsv.lines().zip(frac) {
        let mae: f64 = line.split('\t').nth(3).unwrap().parse().unwrap();
        let expect = f * (1.0 - q) + (1.0 - f) * q;
        assert!((mae - expect).abs() < 1e-6, "{mae} vs {expect}");
    }

    fs::remove_file(dir.path().join("half/00002.pgm")).unwrap();
    let line = fails_with(&salattn(dir.path(), &["eval", "--out", "x", "half", "data/video00"]), "unmatched");
    assert!(line.contains("00002.pgm"), "{line}");
}

#[test]
fn bench_counts_and_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(salattn(dir.path(), &["bench", "16", "16", "32", "2"]));
    assert!(out.contains("4,194,304"), "{out}");
    assert!(out.contains("524,288"), "{out}");
    assert!(out.contains("ratio naive/reordered: 8.00"), "{out}");
    let out = ok(salattn(dir.path(), &["bench", "4", "4", "16", "1"]));
    assert!(out.contains("ratio naive/reordered: 1.00"), "{out}");
    fails_with(&salattn(dir.path(), &["bench", "0", "4", "4", "1"]), "bench");
}

#[test]
fn gradcheck_passes_fails_on_corruption_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let strip = |s: String| s.lines().filter(|l| !l.contains(" checks in ")).collect::<Vec<_>>().join("\n");
    let a = ok(salattn(dir.path(), &["gradcheck"]));
    assert!(!a.contains("FAIL"), "{a}");
    assert!(a.lines().any(|l| l.starts_with("model_bce") && l.ends_with("PASS")), "{a}");
    let b = ok(salattn(dir.path(), &["gradcheck"]));
    assert_eq!(strip(a), strip(b));

    let bad = salattn(dir.path(), &["gradcheck", "--corrupt-matmul"]);
    let line = fails_with(&bad, "gradcheck");
    assert!(line.contains("matmul"), "{line}");
    assert!(stdout(&bad).lines().any(|l| l.starts_with("matmul ") && l.ends_with("FAIL")));
}

#[test]
fn thread_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_salattn"))
        .args(["bench", "4", "4", "4", "1"])
        .current_dir(dir.path())
        .env("SALATTN_THREADS", "many")
        .output()
        .unwrap();
    fails_with(&o, "config");
}
