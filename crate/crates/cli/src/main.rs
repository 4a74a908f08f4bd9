//! `dora`: train, track, synthesize data and evaluate from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dora_core::data::pnm;
use dora_core::data::synthetic::{open_clip, read_manifest, read_masks, write_dataset};
use dora_core::data::{read_shape_split, write_shape_split, SyntheticConfig, VideoSource};
use dora_core::encoder::EncoderParams;
use dora_core::eval::{
    attention_to_binary_mask, box_correct, corloc, frozen_feature, iou, knn_accuracy, matched_jaccard,
    predict_box, EvalReport, FeatureBank, ImageDetail,
};
use dora_core::frame::Frame;
use dora_core::tracker::{track_clip, upsample_map, ObjectMask};
use dora_core::trainer::{self, derive_seed, load_checkpoint, Dataset, TrainConfig, TrainState};
use dora_core::DoraError;

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "dora", version, about = "Attention-based object discovery and self-distillation from video")]
struct Cli {
    /// Training configuration file (`key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one configuration key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a student/teacher pair
    Train(TrainArgs),
    /// Discover objects in the first frame and track them through a clip
    Track(TrackArgs),
    /// Generate a synthetic moving-shapes dataset
    Synth(SynthArgs),
    /// Evaluate frozen features or attention maps
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root: a synthetic dataset or a directory of frame directories
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.csv and checkpoint.dora
    #[arg(long)]
    out: PathBuf,
    /// Continue from out/checkpoint.dora
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps in this invocation; the schedule still spans total_steps
    #[arg(long)]
    stop_after: Option<u64>,
    /// Suppress per-step progress on stderr
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct TrackArgs {
    /// Checkpoint to take the teacher from
    #[arg(long)]
    checkpoint: PathBuf,
    /// A directory of frame_%06d.ppm files, or a single image
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of objects; defaults to the configured count
    #[arg(short, long)]
    k: Option<usize>,
    /// Write only the per-object maps
    #[arg(long)]
    no_overlay: bool,
    /// Use at most this many frames
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Also write a labeled shape-classification split with this many training images
    #[arg(long, default_value_t = 0)]
    shapes_train: usize,
    /// Test images in the shape split
    #[arg(long, default_value_t = 0)]
    shapes_test: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Knn,
    Corloc,
    Jaccard,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate; without one a freshly initialized teacher is used
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset root written by `synth`
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    protocol: Protocol,
    /// Directory for report.csv and report.jsonl
    #[arg(long)]
    out: Option<PathBuf>,
    /// Neighbours for the knn protocol
    #[arg(long, default_value_t = 20)]
    neighbours: usize,
    /// Attention mass kept when turning maps into masks
    #[arg(long, default_value_t = 0.8)]
    mass: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<DoraError>()) {
        Some(DoraError::Config(_) | DoraError::InvalidInput(_)) => EXIT_CONFIG,
        Some(DoraError::NumericOverflow { .. }) => EXIT_NUMERIC,
        Some(_) => EXIT_DATA,
        None => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(&cli, a),
        Command::Track(a) => cmd_track(&cli, a),
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
    }
}

/// Defaults or `--config`, then `--seed`, then `--set` overrides.
fn build_config(cli: &Cli, base: Option<TrainConfig>) -> Result<TrainConfig> {
    let mut cfg = match (&cli.config, base) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(cfg)) => cfg,
        (None, None) => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg.with_overrides(&cli.overrides)?)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let ckpt = a.out.join("checkpoint.dora");
    let (cfg, mut state) = if a.resume {
        let (saved, state) = load_checkpoint(&ckpt)?;
        let cfg = build_config(cli, Some(saved))?;
        (cfg, state)
    } else {
        let cfg = build_config(cli, None)?;
        if a.out.join("metrics.csv").exists() {
            bail!(DoraError::Config(format!(
                "{} already holds a run; pass --resume or choose another --out",
                a.out.display()
            )));
        }
        let state = TrainState::init(&cfg)?;
        (cfg, state)
    };
    let data = Dataset::open(&a.data)?;
    let quiet = a.quiet;
    let stop_at = a.stop_after.map(|n| state.step + n);
    let rows = trainer::run(&cfg, &mut state, &data, &a.out, stop_at, |m| {
        if !quiet {
            eprintln!("step {} loss {:.4} lr {:.3e}", m.step, m.loss_total, m.lr);
        }
    })?;
    if let Some(last) = rows.last() {
        println!("trained to step {} (loss {:.4}); checkpoint {}", last.step, last.loss_total, ckpt.display());
    } else {
        println!("already at step {}; checkpoint {}", state.step, ckpt.display());
    }
    Ok(())
}

/// Model-ready copy of `frame`: RGB or gray as configured, resized if needed.
fn fit(frame: Frame, cfg: &TrainConfig) -> Frame {
    let frame = match (frame.channels(), cfg.channels) {
        (1, 3) => frame.to_rgb(),
        (3, 1) => Frame::from_fn(frame.height(), frame.width(), 1, |y, x, _| frame.luma(y, x)),
        _ => frame,
    };
    if frame.height() == cfg.image_size && frame.width() == cfg.image_size {
        frame
    } else {
        frame.resize(cfg.image_size, cfg.image_size)
    }
}

fn load_frames(input: &Path, max: Option<usize>) -> Result<Vec<Frame>> {
    if input.is_file() {
        return Ok(vec![pnm::read(input)?]);
    }
    let src = VideoSource::from_dir(input, Vec::new())?;
    let count = max.map_or(src.frame_count(), |m| m.min(src.frame_count()));
    Ok((0..count).map(|i| src.frame(i)).collect::<dora_core::Result<_>>()?)
}

/// Grayscale frame tinted by up to three maps: object `j` drives channel `j`.
fn overlay(frame: &Frame, maps: &[ObjectMask]) -> Frame {
    Frame::from_fn(frame.height(), frame.width(), 3, |y, x, c| {
        maps.get(c).map_or(0.0, |m| frame.luma(y, x) * m.get(y, x))
    })
}

fn cmd_track(cli: &Cli, a: &TrackArgs) -> Result<()> {
    let (saved, state) = load_checkpoint(&a.checkpoint)?;
    let cfg = build_config(cli, Some(saved))?;
    let k = a.k.unwrap_or(cfg.objects);
    if k > 3 && !a.no_overlay {
        bail!(DoraError::Config(format!("{k} objects do not fit three overlay channels; pass --no-overlay")));
    }
    let originals = load_frames(&a.input, a.max_frames)?;
    let frames: Vec<Frame> = originals.iter().cloned().map(|f| fit(f, &cfg)).collect();
    let enc = cfg.encoder();
    let tracks = track_clip(&enc, &state.teacher.encoder, &frames, k, derive_seed(cfg.seed, "heads", 0), &cfg.sinkhorn())?;
    fs::create_dir_all(&a.out).map_err(|e| DoraError::io(&a.out, e))?;
    for (t, (map, original)) in tracks.refined.iter().zip(&originals).enumerate() {
        let (h, w) = (original.height(), original.width());
        let masks = (0..k)
            .map(|j| {
                let m = upsample_map(map.weights.row(j), tracks.grid_rows, tracks.grid_cols, cfg.image_size, cfg.image_size)?;
                Ok(resize_mask(&m, h, w))
            })
            .collect::<dora_core::Result<Vec<_>>>()?;
        for (j, m) in masks.iter().enumerate() {
            let gray = Frame::new(h, w, 1, m.values.clone())?;
            pnm::write(&a.out.join(format!("map_obj{j}_{t:06}.pgm")), &gray)?;
        }
        if !a.no_overlay {
            pnm::write(&a.out.join(format!("overlay_{t:06}.ppm")), &overlay(original, &masks))?;
        }
    }
    println!("tracked {k} objects over {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

/// Bilinear resize of a map to the original frame size, identity when sizes agree.
fn resize_mask(m: &ObjectMask, h: usize, w: usize) -> ObjectMask {
    if m.height == h && m.width == w {
        return m.clone();
    }
    let f = Frame::new(m.height, m.width, 1, m.values.clone()).expect("mask dimensions are consistent");
    let r = f.resize(h, w);
    ObjectMask { height: h, width: w, values: r.data().iter().map(|v| v.clamp(0.0, 1.0)).collect() }
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let cfg = SyntheticConfig::new(a.objects, a.size, a.frames);
    let entries = write_dataset(&a.out, a.clips, &cfg, derive_seed(seed, "data", 0))?;
    if a.shapes_train > 0 || a.shapes_test > 0 {
        let root = a.out.join("shapes");
        write_shape_split(&root.join("train"), a.shapes_train, a.size, derive_seed(seed, "data", 1))?;
        write_shape_split(&root.join("test"), a.shapes_test, a.size, derive_seed(seed, "data", 2))?;
    }
    println!("wrote {} clips to {}", entries.len(), a.out.display());
    Ok(())
}

fn eval_model(cli: &Cli, a: &EvalArgs) -> Result<(TrainConfig, EncoderParams<f32>)> {
    match &a.checkpoint {
        Some(path) => {
            let (saved, state) = load_checkpoint(path)?;
            Ok((build_config(cli, Some(saved))?, state.teacher.encoder))
        }
        None => {
            let cfg = build_config(cli, None)?;
            Ok((cfg.clone(), TrainState::init(&cfg)?.teacher.encoder))
        }
    }
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (cfg, encoder) = eval_model(cli, a)?;
    let report = match a.protocol {
        Protocol::Knn => eval_knn(&cfg, &encoder, a)?,
        Protocol::Corloc => eval_corloc(&cfg, &encoder, a)?,
        Protocol::Jaccard => eval_jaccard(&cfg, &encoder, a)?,
    };
    for (name, value) in &report.metrics {
        println!("{name} {value}");
    }
    if let Some(out) = &a.out {
        report.write(out)?;
    }
    Ok(())
}

fn eval_knn(cfg: &TrainConfig, encoder: &EncoderParams<f32>, a: &EvalArgs) -> Result<EvalReport> {
    let root = a.data.join("shapes");
    if !root.join("train").join("labels.txt").is_file() {
        bail!(DoraError::Data(format!(
            "{} has no labeled shape split; generate one with synth --shapes-train/--shapes-test",
            a.data.display()
        )));
    }
    let enc = cfg.encoder();
    let feature = |f: &Frame| frozen_feature(&enc, encoder, &fit(f.clone(), cfg));
    let mut bank = FeatureBank::new(cfg.dim);
    for (frame, label) in read_shape_split(&root.join("train"))? {
        bank.push(&feature(&frame)?, label)?;
    }
    let queries = read_shape_split(&root.join("test"))?
        .iter()
        .map(|(f, l)| Ok((feature(f)?, *l)))
        .collect::<dora_core::Result<Vec<_>>>()?;
    let accuracy = knn_accuracy(&bank, &queries, a.neighbours)?;
    Ok(EvalReport {
        metrics: vec![
            ("knn_accuracy".into(), accuracy),
            ("train_images".into(), bank.len() as f64),
            ("test_images".into(), queries.len() as f64),
        ],
        details: Vec::new(),
    })
}

fn eval_corloc(cfg: &TrainConfig, encoder: &EncoderParams<f32>, a: &EvalArgs) -> Result<EvalReport> {
    let enc = cfg.encoder();
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    let mut details = Vec::new();
    for entry in read_manifest(&a.data)? {
        let clip = open_clip(&a.data, &entry)?;
        for t in 0..clip.frame_count() {
            let frame = clip.frame(t)?;
            if frame.height() != cfg.image_size || frame.width() != cfg.image_size {
                bail!(DoraError::Data(format!(
                    "{} frames are {}x{} but the model expects {}",
                    entry.clip_id,
                    frame.height(),
                    frame.width(),
                    cfg.image_size
                )));
            }
            let pred = predict_box(&enc, encoder, &fit(frame, cfg), a.mass)?;
            let gts = read_masks(&a.data, &entry, t)?.iter().filter_map(|m| m.tight_box()).collect::<Vec<_>>();
            let best = gts.iter().map(|g| iou(&pred, g)).fold(0.0, f64::max);
            details.push(ImageDetail {
                image: format!("{}/{t:06}", entry.clip_id),
                iou: best,
                correct: box_correct(&pred, &gts),
            });
            predictions.push(pred);
            truths.push(gts);
        }
    }
    let score = corloc(&predictions, &truths)?;
    Ok(EvalReport { metrics: vec![("corloc".into(), score), ("images".into(), predictions.len() as f64)], details })
}

fn eval_jaccard(cfg: &TrainConfig, encoder: &EncoderParams<f32>, a: &EvalArgs) -> Result<EvalReport> {
    let enc = cfg.encoder();
    let mut details = Vec::new();
    let mut total = 0.0;
    for entry in read_manifest(&a.data)? {
        let clip = open_clip(&a.data, &entry)?;
        let frames = (0..clip.frame_count()).map(|t| clip.frame(t).map(|f| fit(f, cfg))).collect::<dora_core::Result<Vec<_>>>()?;
        let tracks = track_clip(&enc, encoder, &frames, entry.objects, derive_seed(cfg.seed, "heads", 0), &cfg.sinkhorn())?;
        for (t, map) in tracks.refined.iter().enumerate() {
            let gts = read_masks(&a.data, &entry, t)?;
            let (h, w) = (gts[0].height(), gts[0].width());
            let preds = (0..map.k())
                .map(|j| {
                    let m = upsample_map(map.weights.row(j), tracks.grid_rows, tracks.grid_cols, cfg.image_size, cfg.image_size)?;
                    attention_to_binary_mask(&resize_mask(&m, h, w), a.mass)
                })
                .collect::<dora_core::Result<Vec<_>>>()?;
            let score = matched_jaccard(&preds, &gts)?;
            total += score;
            details.push(ImageDetail { image: format!("{}/{t:06}", entry.clip_id), iou: score, correct: score >= 0.5 });
        }
    }
    if details.is_empty() {
        bail!(DoraError::Data(format!("{} holds no frames", a.data.display())));
    }
    let mean = total / details.len() as f64;
    Ok(EvalReport { metrics: vec![("jaccard".into(), mean), ("frames".into(), details.len() as f64)], details })
}
