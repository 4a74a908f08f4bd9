//! Object discovery from `[cls]` attention, transport-based refinement and
//! cross-attention tracking over the frames of a clip.
//!
//! The reference frame's `[cls]`-attention rows of `k` randomly drawn heads
//! pool the patch queries into object prototypes. A Sinkhorn plan between
//! prototypes and patch embeddings re-balances which patches each prototype
//! claims, and the refined prototypes attend into the patch keys of every
//! frame. Each resulting row, upsampled to image size, masks a view for the
//! student.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::{encode, EncoderConfig, EncoderOutput, EncoderParams};
use crate::error::{DoraError, Result};
use crate::frame::{bilinear_taps, Frame};
use crate::tensor::{softmax_rows, Mat, Scalar};
use crate::transport::{sinkhorn, SinkhornConfig, TransportPlan};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadSubset {
    pub indices: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectPrototypes<T> {
    /// `k × d`.
    pub vectors: Mat<T>,
    pub refined: bool,
}

impl<T: Scalar> ObjectPrototypes<T> {
    pub fn k(&self) -> usize {
        self.vectors.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionMap<T> {
    /// `k × n`, every row a probability vector over patches.
    pub weights: Mat<T>,
    pub frame_index: usize,
    pub refined: bool,
}

impl<T: Scalar> CrossAttentionMap<T> {
    pub fn k(&self) -> usize {
        self.weights.rows()
    }

    /// Patch with the most mass for `object`; lowest index wins ties.
    pub fn argmax(&self, object: usize) -> usize {
        argmax(self.weights.row(object))
    }

    /// Mean cosine similarity over all pairs of object rows (1.0 when `k = 1`).
    pub fn mean_pairwise_cosine(&self) -> f64 {
        let k = self.k();
        if k < 2 {
            return 1.0;
        }
        let rows: Vec<Vec<f64>> =
            (0..k).map(|r| self.weights.row(r).iter().map(|v| v.to_f64().unwrap()).collect()).collect();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..k {
            for j in i + 1..k {
                total += cosine(&rows[i], &rows[j]);
                pairs += 1;
            }
        }
        total / pairs as f64
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Full-resolution map for one object, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ObjectMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![1.0; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

const STOCHASTIC_TOL: f64 = 1e-4;

/// First attention row restricted to the `n` patch columns, one vector per head.
pub fn cls_attention<T: Scalar>(attention: &[Mat<T>]) -> Result<Vec<Vec<T>>> {
    attention
        .iter()
        .enumerate()
        .map(|(h, a)| {
            let (r, c) = a.shape();
            if r != c || r < 2 {
                return Err(DoraError::Shape(format!("attention head {h} is {r}x{c}")));
            }
            for (i, s) in a.row_sums().into_iter().enumerate() {
                if (s.to_f64().unwrap() - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(DoraError::InvalidInput(format!(
                        "attention head {h} row {i} sums to {s:?}, not 1"
                    )));
                }
            }
            if a.as_slice().iter().any(|&v| v < T::zero()) {
                return Err(DoraError::InvalidInput(format!("attention head {h} has negative entries")));
            }
            Ok(a.row(0)[1..].to_vec())
        })
        .collect()
}

/// `k` distinct heads out of `h`, uniformly without replacement.
pub fn sample_heads(h: usize, k: usize, seed: u64) -> Result<HeadSubset> {
    if k == 0 {
        return Err(DoraError::Config("at least one object is required".into()));
    }
    if k > h {
        return Err(DoraError::Config(format!(
            "{k} objects exceed the {h} attention heads; widen the final block with last_heads"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(HeadSubset { indices: sample(&mut rng, h, k).into_vec(), seed })
}

/// `P = A_I · Q̃`.
pub fn object_prototypes<T: Scalar>(cls_rows: &Mat<T>, patch_queries: &Mat<T>) -> Result<ObjectPrototypes<T>> {
    Ok(ObjectPrototypes { vectors: cls_rows.matmul(patch_queries)?, refined: false })
}

/// Transport plan between prototypes and patch embeddings and the prototypes
/// it induces. Each plan row is rescaled to unit mass, so every refined
/// prototype is a convex combination of patch embeddings.
pub fn refine_prototypes<T: Scalar>(
    prototypes: &ObjectPrototypes<T>,
    patch_tokens: &Mat<T>,
    cfg: &SinkhornConfig,
) -> Result<(TransportPlan<T>, ObjectPrototypes<T>)> {
    let scores = prototypes.vectors.matmul_bt(patch_tokens)?;
    let plan = sinkhorn(&scores, cfg)?;
    let k = T::from_usize(prototypes.k()).unwrap();
    let refined = plan.plan.scale(k).matmul(patch_tokens)?;
    Ok((plan, ObjectPrototypes { vectors: refined, refined: true }))
}

/// `softmax(P · K̃ᵀ / √d)` over patches, one row per object.
pub fn cross_attention<T: Scalar>(
    prototypes: &ObjectPrototypes<T>,
    patch_keys: &Mat<T>,
    dim: usize,
    frame_index: usize,
) -> Result<CrossAttentionMap<T>> {
    if prototypes.vectors.cols() != dim || patch_keys.cols() != dim {
        return Err(DoraError::Shape(format!(
            "prototypes {:?} and keys {:?} must both have width {dim}",
            prototypes.vectors.shape(),
            patch_keys.shape()
        )));
    }
    let scale = T::one() / T::from_usize(dim).unwrap().sqrt();
    let weights = softmax_rows(&prototypes.vectors.matmul_bt(patch_keys)?.scale(scale));
    Ok(CrossAttentionMap { weights, frame_index, refined: prototypes.refined })
}

/// Bilinear upsampling of a `rows × cols` patch map to `height × width`,
/// rescaled so the peak is 1. An all-zero map stays zero.
pub fn upsample_map<T: Scalar>(
    row: &[T],
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
) -> Result<ObjectMask> {
    if rows * cols != row.len() || rows == 0 || cols == 0 {
        return Err(DoraError::Shape(format!("{} values do not form a {rows}x{cols} grid", row.len())));
    }
    if height % rows != 0 || width % cols != 0 {
        return Err(DoraError::Shape(format!(
            "{height}x{width} is not an integer multiple of the {rows}x{cols} grid"
        )));
    }
    if row.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(DoraError::InvalidInput("attention map must be finite and nonnegative".into()));
    }
    let grid: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
    let sy = rows as f64 / height as f64;
    let sx = cols as f64 / width as f64;
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, wy) = bilinear_taps((y as f64 + 0.5) * sy - 0.5, rows);
        for x in 0..width {
            let (x0, x1, wx) = bilinear_taps((x as f64 + 0.5) * sx - 0.5, cols);
            let top = grid[y0 * cols + x0] * (1.0 - wx) + grid[y0 * cols + x1] * wx;
            let bot = grid[y1 * cols + x0] * (1.0 - wx) + grid[y1 * cols + x1] * wx;
            values.push(top * (1.0 - wy) + bot * wy);
        }
    }
    let peak = values.iter().copied().fold(0.0f64, f64::max);
    let values = if peak > 0.0 {
        values.into_iter().map(|v| (v / peak).clamp(0.0, 1.0) as f32).collect()
    } else {
        vec![0.0; height * width]
    };
    Ok(ObjectMask { height, width, values })
}

/// `X ⊙ 𝐓`, the mask repeated along channels.
pub fn apply_mask(view: &Frame, mask: &ObjectMask) -> Result<Frame> {
    if view.height() != mask.height || view.width() != mask.width {
        return Err(DoraError::Shape(format!(
            "mask {}x{} does not match view {}x{}",
            mask.height,
            mask.width,
            view.height(),
            view.width()
        )));
    }
    Ok(Frame::from_fn(view.height(), view.width(), view.channels(), |y, x, c| {
        view.get(y, x, c) * mask.get(y, x)
    }))
}

/// Objects found in a reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Discovery<T> {
    pub heads: HeadSubset,
    /// `A_I`, `k × n`.
    pub cls_rows: Mat<T>,
    pub prototypes: ObjectPrototypes<T>,
    pub refined: ObjectPrototypes<T>,
    pub plan: TransportPlan<T>,
}

pub fn discover<T: Scalar>(
    reference: &EncoderOutput<T>,
    k: usize,
    seed: u64,
    cfg: &SinkhornConfig,
) -> Result<Discovery<T>> {
    let per_head = cls_attention(&reference.attention)?;
    let heads = sample_heads(per_head.len(), k, seed)?;
    let cls_rows = Mat::from_rows(&heads.indices.iter().map(|&i| per_head[i].clone()).collect::<Vec<_>>())?;
    let prototypes = object_prototypes(&cls_rows, &reference.patch_queries())?;
    let (plan, refined) = refine_prototypes(&prototypes, &reference.patch_tokens(), cfg)?;
    Ok(Discovery { heads, cls_rows, prototypes, refined, plan })
}

/// Raw and refined maps for every frame of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTracks<T> {
    pub discovery: Discovery<T>,
    pub raw: Vec<CrossAttentionMap<T>>,
    pub refined: Vec<CrossAttentionMap<T>>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

/// Discovers `k` objects in frame 0 and tracks them through the clip.
///
/// A single-frame clip is the image-only mode: the refined prototypes attend
/// back into the keys of the image they came from.
pub fn track_clip<T: Scalar>(
    cfg: &EncoderConfig,
    teacher: &EncoderParams<T>,
    clip: &[Frame],
    k: usize,
    seed: u64,
    sk: &SinkhornConfig,
) -> Result<ClipTracks<T>> {
    if clip.is_empty() {
        return Err(DoraError::InvalidInput("empty clip".into()));
    }
    let outputs: Vec<EncoderOutput<T>> =
        clip.par_iter().map(|f| encode(cfg, teacher, f)).collect::<Result<_>>()?;
    track_outputs(&outputs, cfg.dim, k, seed, sk)
}

/// [`track_clip`] over already-encoded frames.
pub fn track_outputs<T: Scalar>(
    outputs: &[EncoderOutput<T>],
    dim: usize,
    k: usize,
    seed: u64,
    sk: &SinkhornConfig,
) -> Result<ClipTracks<T>> {
    let discovery = discover(&outputs[0], k, seed, sk)?;
    let mut raw = Vec::with_capacity(outputs.len());
    let mut refined = Vec::with_capacity(outputs.len());
    for (t, out) in outputs.iter().enumerate() {
        let keys = out.patch_keys();
        raw.push(cross_attention(&discovery.prototypes, &keys, dim, t)?);
        refined.push(cross_attention(&discovery.refined, &keys, dim, t)?);
    }
    Ok(ClipTracks {
        discovery,
        raw,
        refined,
        grid_rows: outputs[0].grid_rows,
        grid_cols: outputs[0].grid_cols,
    })
}
