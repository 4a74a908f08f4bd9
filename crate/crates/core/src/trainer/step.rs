//! One optimization step: teacher tracking, masked and local student views,
//! losses, gradients, optimizer, EMA and centering.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::synthetic::{open_clip, read_manifest};
use crate::data::video::{frame_file_name, read_cut_list};
use crate::data::{base_crop, choose_crop_window, make_views, sample_clip_cut_aware, VideoSource, ViewSet};
use crate::distill::{
    center_update, ema_update, head_forward_tape, head_logits, local_loss, multi_object_loss, probabilities,
    ModelParams, ProbVector, Role,
};
use crate::encoder::{encode, forward, EncoderOutput};
use crate::error::{DoraError, Result};
use crate::frame::{patchify, Frame};
use crate::tensor::{Mat, Scalar};
use crate::tracker::{apply_mask, cross_attention, discover, upsample_map};
use crate::trainer::config::TrainConfig;
use crate::trainer::optim::{ema_schedule, lr_schedule, optimizer_step};
use crate::trainer::{derive_seed, TrainState};
use crate::autodiff::Tape;

/// Videos to sample clips from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<VideoSource>,
}

impl Dataset {
    /// A synthetic dataset root (with `manifest.txt`), or a directory whose
    /// subdirectories each hold `frame_%06d.ppm` files and an optional `cuts.txt`.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(DoraError::Data(format!("data directory {} does not exist", root.display())));
        }
        let videos = if root.join("manifest.txt").is_file() {
            read_manifest(root)?.iter().map(|e| open_clip(root, e)).collect::<Result<Vec<_>>>()?
        } else {
            let mut dirs: Vec<PathBuf> = fs::read_dir(root)
                .map_err(|e| DoraError::io(root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(frame_file_name(0)).is_file())
                .collect();
            if root.join(frame_file_name(0)).is_file() {
                dirs.push(root.to_path_buf());
            }
            dirs.sort();
            dirs.iter()
                .map(|d| {
                    let cuts_path = d.join("cuts.txt");
                    let cuts = if cuts_path.is_file() { read_cut_list(&cuts_path)? } else { Vec::new() };
                    VideoSource::from_dir(d, cuts)
                })
                .collect::<Result<Vec<_>>>()?
        };
        if videos.is_empty() {
            return Err(DoraError::Data(format!("no videos under {}", root.display())));
        }
        Ok(Self { videos })
    }

    pub fn from_videos(videos: Vec<VideoSource>) -> Result<Self> {
        if videos.is_empty() {
            return Err(DoraError::Data("empty dataset".into()));
        }
        Ok(Self { videos })
    }
}

/// Views of every frame of one sampled clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipViews {
    pub frames: Vec<ViewSet>,
}

fn conform(frame: Frame, channels: usize) -> Result<Frame> {
    match (frame.channels(), channels) {
        (a, b) if a == b => Ok(frame),
        (1, 3) => Ok(frame.to_rgb()),
        (3, 1) => Ok(Frame::from_fn(frame.height(), frame.width(), 1, |y, x, _| frame.luma(y, x))),
        (a, b) => Err(DoraError::Data(format!("cannot convert {a}-channel frames to {b}"))),
    }
}

/// Samples the clips of step `step`. Every frame of a clip shares one base-crop
/// window and one view seed, so view geometry is identical across the clip.
pub fn sample_batch(cfg: &TrainConfig, data: &Dataset, step: u64) -> Result<Vec<ClipViews>> {
    let views = cfg.views();
    (0..cfg.batch_clips)
        .into_par_iter()
        .map(|b| {
            let slot = step * cfg.batch_clips as u64 + b as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "data", slot));
            let video = &data.videos[rng.random_range(0..data.videos.len())];
            let clip = sample_clip_cut_aware(video, cfg.frames, cfg.stride, rng.random())?;
            let frames = clip
                .indices()
                .into_iter()
                .map(|i| video.frame(i).and_then(|f| conform(f, cfg.channels)))
                .collect::<Result<Vec<_>>>()?;
            let window = choose_crop_window(frames[0].height(), frames[0].width(), cfg.base_crop, rng.random())?;
            let view_seed = derive_seed(cfg.seed, "augment", slot);
            let frames = frames
                .iter()
                .map(|f| make_views(&base_crop(f, window)?, &views, view_seed))
                .collect::<Result<Vec<_>>>()?;
            Ok(ClipViews { frames })
        })
        .collect()
}

/// Where one frame's student inputs sit in [`StudentTargets::inputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLayout {
    pub clip: usize,
    /// teacher distribution per global view
    pub teacher: Vec<ProbVector>,
    /// `masked[v][i]`: global view `v` masked by object `i`
    pub masked: Vec<Vec<usize>>,
    pub local: Vec<usize>,
}

/// Everything the student needs for one step, with the teacher already run.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentTargets {
    pub inputs: Vec<Frame>,
    /// Per input, the summed teacher distributions it is compared with,
    /// divided by `T × clips`. The loss is `−Σ w · log_softmax(z/τ_s)`.
    pub weights: Vec<Vec<f64>>,
    pub frames: Vec<FrameLayout>,
    pub clips: usize,
    pub frames_per_clip: usize,
    pub teacher_logits: Vec<Vec<f64>>,
    pub sk_error: f64,
    pub sk_converged: bool,
}

/// Runs the teacher over a batch: discovery on frame 0, tracking through
/// every frame and view, masking.
pub fn prepare_targets<T: Scalar>(
    cfg: &TrainConfig,
    teacher: &ModelParams<T>,
    center: &[f64],
    batch: &[ClipViews],
    step: u64,
) -> Result<StudentTargets> {
    let enc = cfg.encoder();
    let head = cfg.head();
    let sk = cfg.sinkhorn();
    let frames_per_clip = batch.first().map_or(0, |c| c.frames.len());
    if batch.is_empty() || frames_per_clip == 0 || batch.iter().any(|c| c.frames.len() != frames_per_clip) {
        return Err(DoraError::InvalidInput("batch needs clips of equal, nonzero length".into()));
    }
    let norm = (frames_per_clip * batch.len()) as f64;
    let mut out = StudentTargets {
        inputs: Vec::new(),
        weights: Vec::new(),
        frames: Vec::new(),
        clips: batch.len(),
        frames_per_clip,
        teacher_logits: Vec::new(),
        sk_error: 0.0,
        sk_converged: true,
    };
    for (c, clip) in batch.iter().enumerate() {
        let globals: Vec<&Frame> = clip.frames.iter().flat_map(|vs| vs.globals.iter().map(|v| &v.frame)).collect();
        let encoded: Vec<EncoderOutput<T>> =
            globals.par_iter().map(|f| encode(&enc, &teacher.encoder, f)).collect::<Result<_>>()?;
        let views = clip.frames[0].globals.len();
        let heads_seed = derive_seed(cfg.seed, "heads", step * batch.len() as u64 + c as u64);
        let discovery = discover(&encoded[0], cfg.objects, heads_seed, &sk)?;
        out.sk_error = out.sk_error.max(discovery.plan.marginal_error);
        out.sk_converged &= discovery.plan.converged;

        for (t, vs) in clip.frames.iter().enumerate() {
            let mut teacher_probs = Vec::with_capacity(views);
            let mut masked = Vec::with_capacity(views);
            for (v, view) in vs.globals.iter().enumerate() {
                let o = &encoded[t * views + v];
                let logits = head_logits(&teacher.head, o.cls())?;
                teacher_probs.push(probabilities(&head, &logits, Role::Teacher, center)?);
                out.teacher_logits.push(logits);
                let map = cross_attention(&discovery.refined, &o.patch_keys(), enc.dim, t)?;
                let mut ids = Vec::with_capacity(cfg.objects);
                for i in 0..cfg.objects {
                    let row: Vec<f64> = map.weights.row(i).iter().map(|w| w.to_f64().unwrap()).collect();
                    let mask = upsample_map(&row, o.grid_rows, o.grid_cols, view.frame.height(), view.frame.width())?;
                    ids.push(out.inputs.len());
                    out.inputs.push(apply_mask(&view.frame, &mask)?);
                }
                masked.push(ids);
            }
            let d = head.out_dim;
            for (v, ids) in masked.iter().enumerate() {
                let mut w = vec![0.0; d];
                for (u, p) in teacher_probs.iter().enumerate() {
                    if u != v {
                        w.iter_mut().zip(p.as_slice()).for_each(|(a, b)| *a += b / norm);
                    }
                }
                for _ in ids {
                    out.weights.push(w.clone());
                }
            }
            let mut w_local = vec![0.0; d];
            for p in &teacher_probs {
                w_local.iter_mut().zip(p.as_slice()).for_each(|(a, b)| *a += b / norm);
            }
            let local = vs
                .locals
                .iter()
                .map(|l| {
                    out.inputs.push(l.frame.clone());
                    out.weights.push(w_local.clone());
                    out.inputs.len() - 1
                })
                .collect();
            out.frames.push(FrameLayout { clip: c, teacher: teacher_probs, masked, local });
        }
    }
    Ok(out)
}

/// Student losses of one step and, optionally, their gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentEval<T> {
    /// `−Σ w · log_softmax(z/τ_s)` over all inputs
    pub objective: f64,
    pub loss_total: f64,
    pub loss_obj: f64,
    pub loss_local: f64,
    /// cross-entropy terms per frame
    pub obj_terms: usize,
    pub local_terms: usize,
    pub logits: Vec<Vec<f64>>,
    pub grads: Option<ModelParams<T>>,
}

struct Partial<T> {
    objective: f64,
    logits: Vec<Vec<f64>>,
    grads: Option<ModelParams<T>>,
}

fn student_input<T: Scalar>(
    cfg: &TrainConfig,
    student: &ModelParams<T>,
    input: &Frame,
    weights: &[f64],
    with_grad: bool,
) -> Result<Partial<T>> {
    let enc = cfg.encoder();
    let grid = patchify::<T>(input, enc.patch)?;
    let mut tape = Tape::new();
    let w = student.bind(&mut tape);
    let trace = forward(&enc, &w.encoder, &mut tape, &grid)?;
    let logits = head_forward_tape(&w.head, &mut tape, trace.cls);
    let z: Vec<f64> = tape.value(logits).as_slice().iter().map(|v| v.to_f64().unwrap()).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(DoraError::NumericOverflow { layer: enc.depth, detail: "student head logits".into() });
    }
    let scaled = tape.scale(logits, T::lit(1.0 / cfg.student_temp));
    let log_p = tape.log_softmax_rows(scaled);
    let neg_w = Mat::from_vec(1, weights.len(), weights.iter().map(|&x| T::lit(-x)).collect())?;
    let loss = tape.dot_const(log_p, neg_w);
    let objective = tape.value(loss).get(0, 0).to_f64().unwrap();
    let grads = with_grad.then(|| {
        let mut g = tape.backward(loss);
        w.map(&mut |_, &v| g.take(v).unwrap_or_else(|| Mat::zeros(tape.value(v).rows(), tape.value(v).cols())))
    });
    Ok(Partial { objective, logits: vec![z], grads })
}

/// Inputs per work unit; sums inside a unit and across units run in a fixed
/// order, so results do not depend on the thread count.
const CHUNK: usize = 4;

fn merge<T: Scalar>(mut a: Partial<T>, b: Partial<T>) -> Partial<T> {
    a.objective += b.objective;
    a.logits.extend(b.logits);
    a.grads = match (a.grads, b.grads) {
        (Some(mut x), Some(y)) => {
            let src = y.leaves();
            let mut i = 0;
            x.visit_mut(&mut |_, m| {
                m.add_assign(src[i]).expect("same shapes");
                i += 1;
            });
            Some(x)
        }
        (x, _) => x,
    };
    a
}

/// Evaluates the student on prepared targets.
pub fn student_objective<T: Scalar>(
    cfg: &TrainConfig,
    student: &ModelParams<T>,
    targets: &StudentTargets,
    with_grad: bool,
) -> Result<StudentEval<T>> {
    let idx: Vec<usize> = (0..targets.inputs.len()).collect();
    let partials: Vec<Partial<T>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc: Option<Partial<T>> = None;
            for &i in chunk {
                let p = student_input(cfg, student, &targets.inputs[i], &targets.weights[i], with_grad)?;
                acc = Some(match acc {
                    None => p,
                    Some(a) => merge(a, p),
                });
            }
            Ok(acc.expect("chunks are nonempty"))
        })
        .collect::<Result<_>>()?;
    let total = partials.into_iter().reduce(merge).ok_or_else(|| DoraError::InvalidInput("no student inputs".into()))?;

    let head = cfg.head();
    let probs = total
        .logits
        .iter()
        .map(|z| probabilities(&head, z, Role::Student, &[]))
        .collect::<Result<Vec<_>>>()?;
    let mut obj = vec![0.0; targets.clips];
    let mut local = vec![0.0; targets.clips];
    let (mut obj_terms, mut local_terms) = (None, None);
    for f in &targets.frames {
        let masked: Vec<Vec<ProbVector>> =
            f.masked.iter().map(|ids| ids.iter().map(|&i| probs[i].clone()).collect()).collect();
        let lo = multi_object_loss(&f.teacher, &masked)?;
        let locals: Vec<ProbVector> = f.local.iter().map(|&i| probs[i].clone()).collect();
        let ll = local_loss(&f.teacher, &locals)?;
        obj[f.clip] += lo.value;
        local[f.clip] += ll.value;
        for (slot, n) in [(&mut obj_terms, lo.terms), (&mut local_terms, ll.terms)] {
            if slot.is_some_and(|s| s != n) {
                return Err(DoraError::InvalidInput("frames disagree on loss term counts".into()));
            }
            *slot = Some(n);
        }
    }
    let scale = 1.0 / (targets.frames_per_clip * targets.clips) as f64;
    let loss_obj = obj.iter().sum::<f64>() * scale;
    let loss_local = local.iter().sum::<f64>() * scale;
    Ok(StudentEval {
        objective: total.objective,
        loss_total: loss_obj + loss_local,
        loss_obj,
        loss_local,
        obj_terms: obj_terms.unwrap_or(0),
        local_terms: local_terms.unwrap_or(0),
        logits: total.logits,
        grads: total.grads,
    })
}

/// One metrics row plus instrumentation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_obj: f64,
    pub loss_local: f64,
    pub lr: f64,
    pub ema_alpha: f64,
    pub sk_err: f64,
    pub sk_converged: bool,
    pub obj_terms: usize,
    pub local_terms: usize,
    /// times the optimizer call changed teacher parameters (must stay 0)
    pub teacher_violations: usize,
}

pub const METRICS_HEADER: &str = "step,loss_total,loss_obj,loss_local,lr,ema_alpha,sk_err";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss_total, self.loss_obj, self.loss_local, self.lr, self.ema_alpha, self.sk_err
        )
    }
}

fn fingerprint(p: &ModelParams<f32>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    p.visit(&mut |_, m| {
        for v in m.as_slice() {
            h.update(&v.to_le_bytes());
        }
    });
    h.finalize()
}

/// Trains on an already sampled batch.
pub fn train_on_batch(cfg: &TrainConfig, state: &mut TrainState, batch: &[ClipViews]) -> Result<StepMetrics> {
    let center: Vec<f64> = state.center.iter().map(|&c| c as f64).collect();
    let targets = prepare_targets(cfg, &state.teacher, &center, batch, state.step)?;
    let eval = student_objective(cfg, &state.student, &targets, true)?;
    let grads = eval.grads.expect("gradients were requested");
    let next = state.step + 1;
    let lr = lr_schedule(next, cfg);

    let before = fingerprint(&state.teacher);
    optimizer_step(&mut state.student, &grads, lr, cfg, &mut state.optimizer)?;
    let teacher_violations = usize::from(fingerprint(&state.teacher) != before);

    let alpha = ema_schedule(next, cfg);
    ema_update(&mut state.teacher, &state.student, alpha)?;
    let d = cfg.out_dim;
    let mut mean = vec![0.0; d];
    for l in &targets.teacher_logits {
        mean.iter_mut().zip(l).for_each(|(m, v)| *m += v / targets.teacher_logits.len() as f64);
    }
    state.center = center_update(&center, &mean, cfg.center_momentum).into_iter().map(|c| c as f32).collect();
    state.step = next;

    Ok(StepMetrics {
        step: next,
        loss_total: eval.loss_total,
        loss_obj: eval.loss_obj,
        loss_local: eval.loss_local,
        lr,
        ema_alpha: alpha,
        sk_err: targets.sk_error,
        sk_converged: targets.sk_converged,
        obj_terms: eval.obj_terms,
        local_terms: eval.local_terms,
        teacher_violations,
    })
}

/// Samples the next batch from `data` and trains on it.
pub fn train_step(cfg: &TrainConfig, state: &mut TrainState, data: &Dataset) -> Result<StepMetrics> {
    let batch = sample_batch(cfg, data, state.step)?;
    train_on_batch(cfg, state, &batch)
}
