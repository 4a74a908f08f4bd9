use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dora_core::data::pnm;
use dora_core::data::synthetic::{read_manifest, read_masks};
use dora_core::eval::{BinaryMask, EvalReport};
use dora_core::frame::Frame;

const SMALL: &[&str] = &[
    "--set", "image_size=32", "--set", "base_crop=32", "--set", "local_size=16", "--set", "dim=12",
    "--set", "depth=1", "--set", "heads=3", "--set", "out_dim=16", "--set", "batch_clips=1",
    "--set", "frames=2", "--set", "local_views=2", "--set", "warmup_steps=1",
];

fn dora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dora")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, seed: &str, extra: &[&str]) {
    let mut args = vec!["--seed", seed, "synth", "--out", s(dir), "--clips", "2", "--frames", "3", "--size", "32"];
    args.extend_from_slice(extra);
    let o = dora(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(data: &Path, out: &Path, steps: &str) -> Output {
    let total = format!("total_steps={steps}");
    let mut args = SMALL.to_vec();
    args.extend(["--set", &total, "train", "--quiet", "--data", s(data), "--out", s(out)]);
    dora(&args)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_flags_and_unknown_flags_exit_64() {
    let o = dora(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for word in ["train", "track", "synth", "eval", "--config", "--seed", "--set"] {
        assert!(text.contains(word), "help lacks {word}");
    }
    let o = dora(&["train", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dora(&["train", "--data", s(&tmp.path().join("missing")), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));

    let o = dora(&["--set", "no_such_key=1", "train", "--data", s(tmp.path()), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));

    let o = dora(&["--set", "lr=fast", "train", "--data", s(tmp.path()), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "overrides are type-checked");

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "depth = 0\n").unwrap();
    let o = dora(&["--config", s(&cfg), "train", "--data", s(tmp.path()), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_writes_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "5", &[]);
    synth(&b, "5", &[]);
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    assert_eq!(files(&a), files(&b));

    for entry in read_manifest(&a).unwrap() {
        for t in 0..entry.frames {
            let masks = read_masks(&a, &entry, t).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    assert!(masks.iter().filter(|m| m.get(y, x)).count() <= 1, "masks overlap at ({y},{x})");
                }
            }
        }
    }
}

#[test]
fn train_writes_rows_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1", &[]);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for r in [&r1, &r2] {
        let o = train(&data, r, "2");
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csv = fs::read(r1.join("metrics.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 3, "header plus two rows");
    assert_eq!(csv, fs::read(r2.join("metrics.csv")).unwrap());
    assert!(r1.join("checkpoint.dora").is_file());

    // a second fresh run into the same directory is refused
    assert_eq!(train(&data, &r1, "2").status.code(), Some(1));
}

#[test]
fn resume_continues_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", &[]);
    let (whole, split) = (tmp.path().join("whole"), tmp.path().join("split"));
    assert!(train(&data, &whole, "4").status.success());
    let mut args = SMALL.to_vec();
    args.extend(["--set", "total_steps=4", "train", "--quiet", "--stop-after", "2", "--data", s(&data), "--out", s(&split)]);
    assert!(dora(&args).status.success());
    assert_eq!(fs::read_to_string(split.join("metrics.csv")).unwrap().lines().count(), 3);
    let o = dora(&["train", "--quiet", "--resume", "--data", s(&data), "--out", s(&split)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(whole.join("metrics.csv")).unwrap(), fs::read(split.join("metrics.csv")).unwrap());
}

fn trained_checkpoint(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = tmp.join("data");
    synth(&data, "3", &["--shapes-train", "24", "--shapes-test", "9"]);
    let run = tmp.join("run");
    let o = train(&data, &run, "2");
    assert!(o.status.success(), "{}", stderr(&o));
    (data, run.join("checkpoint.dora"))
}

#[test]
fn track_writes_overlays_and_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_checkpoint(tmp.path());
    let clip = data.join("clips").join("clip_0000");
    let out = tmp.path().join("track");
    let o = dora(&["track", "--checkpoint", s(&ckpt), "--input", s(&clip), "--out", s(&out), "-k", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("overlay_")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.starts_with("map_obj")).count(), 9);

    // single image: one overlay
    let single = tmp.path().join("single");
    let o = dora(&["track", "--checkpoint", s(&ckpt), "--input", s(&clip.join("frame_000000.ppm")), "--out", s(&single)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(single.join("overlay_000000.ppm").is_file());
    assert_eq!(fs::read_dir(&single).unwrap().count(), 1 + 3);

    // more objects than channels
    let wide = tmp.path().join("wide");
    let o = dora(&["--set", "heads=4", "track", "--checkpoint", s(&ckpt), "--input", s(&clip), "--out", s(&wide), "-k", "4"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn track_without_overlay_allows_more_objects() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4", &[]);
    let run = tmp.path().join("run");
    let total = "total_steps=2";
    let mut args = SMALL.to_vec();
    args.extend(["--set", "heads=4", "--set", total, "train", "--quiet", "--data", s(&data), "--out", s(&run)]);
    assert!(dora(&args).status.success());
    let out = tmp.path().join("maps");
    let clip = data.join("clips").join("clip_0001");
    let ckpt = run.join("checkpoint.dora");
    let o = dora(&["track", "--checkpoint", s(&ckpt), "--input", s(&clip), "--out", s(&out), "-k", "4", "--no-overlay"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 4 * 3);
}

#[test]
fn overlay_of_white_frame_equals_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained_checkpoint(tmp.path());
    let clip = tmp.path().join("white");
    fs::create_dir_all(&clip).unwrap();
    pnm::write(&clip.join("frame_000000.ppm"), &Frame::filled(32, 32, 3, 1.0)).unwrap();
    let out = tmp.path().join("out");
    let o = dora(&["track", "--checkpoint", s(&ckpt), "--input", s(&clip), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let overlay = pnm::read_ppm(&out.join("overlay_000000.ppm")).unwrap();
    for j in 0..3 {
        let map = pnm::read_pgm(&out.join(format!("map_obj{j}_000000.pgm"))).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(overlay.get(y, x, j), map.get(y, x, 0), "object {j} at ({y},{x})");
            }
        }
    }
}

#[test]
fn eval_protocols_report_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_checkpoint(tmp.path());

    let out = tmp.path().join("knn");
    let o = dora(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--protocol", "knn", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let acc: f64 = csv.lines().find_map(|l| l.strip_prefix("knn_accuracy,")).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let out = tmp.path().join("corloc");
    let o = dora(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--protocol", "corloc", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let jsonl = fs::read_to_string(out.join("report.jsonl")).unwrap();
    let lines: Vec<&str> = jsonl.lines().collect();
    assert_eq!(lines.len(), 6);
    // recompute the summary from the per-image rows
    let hits = lines.iter().filter(|l| l.contains("\"correct\":true")).count();
    let expected = EvalReport {
        metrics: vec![("corloc".into(), 100.0 * hits as f64 / 6.0), ("images".into(), 6.0)],
        details: Vec::new(),
    };
    assert_eq!(csv, expected.to_csv());

    let o = dora(&["eval", "--data", s(&data), "--protocol", "jaccard"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    let j: f64 = text.lines().find_map(|l| l.strip_prefix("jaccard ")).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&j));
}

#[test]
fn knn_without_labels_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "6", &[]);
    let o = dora(&["eval", "--data", s(&data), "--protocol", "knn"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn binary_masks_read_back_from_synth() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "7", &[]);
    let entry = &read_manifest(tmp.path()).unwrap()[0];
    let masks: Vec<BinaryMask> = read_masks(tmp.path(), entry, 0).unwrap();
    assert_eq!(masks.len(), 3);
    assert!(masks.iter().all(|m| m.count() > 0));
}
