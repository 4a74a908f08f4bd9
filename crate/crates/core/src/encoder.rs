//! Minimal pre-norm vision transformer.
//!
//! Frames are split into `p × p` patches, linearly projected to `d`
//! dimensions, prefixed with a learned `[cls]` token and passed through
//! `depth` blocks of multi-head self-attention and a GELU MLP. Besides the
//! final token embeddings the encoder exposes the query/key projections and
//! per-head attention matrices of one designated block, which the tracker
//! reads objects from.

use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{DoraError, Result};
use crate::frame::{patchify, Frame, PatchGrid};
use crate::params::{param_struct, trunc_normal};
use crate::tensor::{Mat, Scalar};

/// Which block's queries, keys and attention the tracker consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TrackerLayer {
    #[default]
    Last,
    SecondLast,
}

impl FromStr for TrackerLayer {
    type Err = DoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "second_last" => Ok(Self::SecondLast),
            other => Err(DoraError::Config(format!("tracker_layer must be last|second_last, got {other}"))),
        }
    }
}

impl std::fmt::Display for TrackerLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Last => "last",
            Self::SecondLast => "second_last",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Side of the square input the positional table is laid out for.
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Head count of the final block when it is widened to track more objects
    /// than `heads`.
    pub last_heads: Option<usize>,
    pub mlp_ratio: usize,
    pub tracker_layer: TrackerLayer,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            channels: 3,
            dim: 48,
            depth: 4,
            heads: 6,
            last_heads: None,
            mlp_ratio: 4,
            tracker_layer: TrackerLayer::Last,
        }
    }
}

/// Per-head dimension `d / h`.
pub fn head_dims(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim % heads != 0 {
        return Err(DoraError::Config(format!("embedding dim {dim} is not divisible by {heads} heads")));
    }
    Ok(dim / heads)
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(DoraError::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(DoraError::Config("channels must be 1 or 3".into()));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(DoraError::Config("depth and mlp_ratio must be positive".into()));
        }
        head_dims(self.dim, self.heads)?;
        if let Some(h) = self.last_heads {
            head_dims(self.dim, h)?;
        }
        self.tracker_block()?;
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn heads_in_block(&self, block: usize) -> usize {
        match self.last_heads {
            Some(h) if block + 1 == self.depth => h,
            _ => self.heads,
        }
    }

    /// Head count available to the tracker.
    pub fn tracker_heads(&self) -> usize {
        self.tracker_block().map(|b| self.heads_in_block(b)).unwrap_or(self.heads)
    }

    pub fn tracker_block(&self) -> Result<usize> {
        match self.tracker_layer {
            TrackerLayer::Last => Ok(self.depth - 1),
            TrackerLayer::SecondLast if self.depth >= 2 => Ok(self.depth - 2),
            TrackerLayer::SecondLast => {
                Err(DoraError::Config("tracker_layer=second_last needs depth >= 2".into()))
            }
        }
    }
}

param_struct! {
    /// One transformer block.
    BlockWeights {
        ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub cls: P,
    /// `(n + 1) × d`, row 0 belongs to the `[cls]` token.
    pub pos: P,
    pub blocks: Vec<BlockWeights<P>>,
    pub norm_g: P,
    pub norm_b: P,
}

pub type EncoderParams<T> = EncoderWeights<Mat<T>>;

impl<P> EncoderWeights<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> EncoderWeights<Q> {
        EncoderWeights {
            patch_w: f(&format!("{prefix}patch_w"), &self.patch_w),
            patch_b: f(&format!("{prefix}patch_b"), &self.patch_b),
            cls: f(&format!("{prefix}cls"), &self.cls),
            pos: f(&format!("{prefix}pos"), &self.pos),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("{prefix}blocks.{i}."), f))
                .collect(),
            norm_g: f(&format!("{prefix}norm_g"), &self.norm_g),
            norm_b: f(&format!("{prefix}norm_b"), &self.norm_b),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}patch_w"), &self.patch_w);
        f(format!("{prefix}patch_b"), &self.patch_b);
        f(format!("{prefix}cls"), &self.cls);
        f(format!("{prefix}pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}blocks.{i}."), f);
        }
        f(format!("{prefix}norm_g"), &self.norm_g);
        f(format!("{prefix}norm_b"), &self.norm_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}patch_w"), &mut self.patch_w);
        f(format!("{prefix}patch_b"), &mut self.patch_b);
        f(format!("{prefix}cls"), &mut self.cls);
        f(format!("{prefix}pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}blocks.{i}."), f);
        }
        f(format!("{prefix}norm_g"), &mut self.norm_g);
        f(format!("{prefix}norm_b"), &mut self.norm_b);
    }
}

impl<T: Scalar> EncoderWeights<Mat<T>> {
    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        let std = 0.02;
        let blocks = (0..cfg.depth)
            .map(|_| BlockWeights {
                ln1_g: Mat::filled(1, d, T::one()),
                ln1_b: Mat::zeros(1, d),
                qkv_w: trunc_normal(d, 3 * d, std, rng),
                qkv_b: Mat::zeros(1, 3 * d),
                proj_w: trunc_normal(d, d, std, rng),
                proj_b: Mat::zeros(1, d),
                ln2_g: Mat::filled(1, d, T::one()),
                ln2_b: Mat::zeros(1, d),
                fc1_w: trunc_normal(d, hidden, std, rng),
                fc1_b: Mat::zeros(1, hidden),
                fc2_w: trunc_normal(hidden, d, std, rng),
                fc2_b: Mat::zeros(1, d),
            })
            .collect();
        Ok(Self {
            patch_w: trunc_normal(patch_dim, d, std, rng),
            patch_b: Mat::zeros(1, d),
            cls: trunc_normal(1, d, std, rng),
            pos: trunc_normal(cfg.tokens() + 1, d, std, rng),
            blocks,
            norm_g: Mat::filled(1, d, T::one()),
            norm_b: Mat::zeros(1, d),
        })
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> EncoderWeights<Var> {
        self.map("", &mut |_, m| tape.leaf(m.clone()))
    }
}

/// Handles into a recorded forward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// `(n + 1) × d` final token embeddings.
    pub tokens: Var,
    /// `1 × d` `[cls]` embedding.
    pub cls: Var,
    pub queries: Var,
    pub keys: Var,
    pub attention: Vec<Var>,
}

/// Concrete values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    /// `Z = [Z_cls; Z̃]`, `(n + 1) × d`.
    pub tokens: Mat<T>,
    pub queries: Mat<T>,
    pub keys: Mat<T>,
    /// One `(n + 1) × (n + 1)` row-stochastic matrix per head of the tracker block.
    pub attention: Vec<Mat<T>>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn n(&self) -> usize {
        self.tokens.rows() - 1
    }

    pub fn cls(&self) -> &[T] {
        self.tokens.row(0)
    }

    pub fn patch_tokens(&self) -> Mat<T> {
        self.tokens.slice_rows(1, self.n())
    }

    pub fn patch_queries(&self) -> Mat<T> {
        self.queries.slice_rows(1, self.n())
    }

    pub fn patch_keys(&self) -> Mat<T> {
        self.keys.slice_rows(1, self.n())
    }
}

/// Block-average pooling matrix mapping the full positional grid onto a coarser
/// `rows × cols` grid.
fn pooling_matrix<T: Scalar>(full: usize, rows: usize, cols: usize) -> Result<Mat<T>> {
    if rows == 0 || cols == 0 || full % rows != 0 || full % cols != 0 {
        return Err(DoraError::Shape(format!(
            "{rows}x{cols} token grid does not divide the {full}x{full} positional grid"
        )));
    }
    let (fy, fx) = (full / rows, full / cols);
    let w = T::one() / T::from_usize(fy * fx).unwrap();
    Ok(Mat::from_fn(rows * cols, full * full, |t, s| {
        let (r, c) = (t / cols, t % cols);
        let (sr, sc) = (s / full, s % full);
        if sr / fy == r && sc / fx == c {
            w
        } else {
            T::zero()
        }
    }))
}

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Records a forward pass on `tape`.
///
/// Grids smaller than the configured one (local crops) read positional
/// embeddings through block-average pooling of the full table.
pub fn forward<T: Scalar>(
    cfg: &EncoderConfig,
    weights: &EncoderWeights<Var>,
    tape: &mut Tape<T>,
    grid: &PatchGrid<T>,
) -> Result<EncoderTrace> {
    let d = cfg.dim;
    let full = cfg.grid();
    if grid.patch != cfg.patch || grid.channels != cfg.channels {
        return Err(DoraError::Shape(format!(
            "patch {}x{}x{} does not match encoder {}x{}x{}",
            grid.patch, grid.patch, grid.channels, cfg.patch, cfg.patch, cfg.channels
        )));
    }
    let n = grid.n();
    // pixels are standardized around mid-gray before projection
    let x = tape.leaf(grid.vectors.map(|v| (v - T::lit(PIXEL_MEAN)) / T::lit(PIXEL_STD)));
    let embedded = tape.matmul(x, weights.patch_w);
    let embedded = tape.add_bias(embedded, weights.patch_b);
    let pos_cls = tape.slice_rows(weights.pos, 0, 1);
    let mut pos_patch = tape.slice_rows(weights.pos, 1, full * full);
    if grid.rows != full || grid.cols != full {
        let pool = tape.leaf(pooling_matrix(full, grid.rows, grid.cols)?);
        pos_patch = tape.matmul(pool, pos_patch);
    }
    let cls_tok = tape.add(weights.cls, pos_cls);
    let patches = tape.add(embedded, pos_patch);
    let mut h = tape.concat_rows(&[cls_tok, patches]);

    let tracker_block = cfg.tracker_block()?;
    let mut traced = None;
    for (b, w) in weights.blocks.iter().enumerate() {
        let heads = cfg.heads_in_block(b);
        let dh = head_dims(d, heads)?;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let a = tape.layer_norm(h, w.ln1_g, w.ln1_b);
        let qkv = tape.matmul(a, w.qkv_w);
        let qkv = tape.add_bias(qkv, w.qkv_b);
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);
        let mut outs = Vec::with_capacity(heads);
        let mut attn = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = tape.slice_cols(q, i * dh, dh);
            let kh = tape.slice_cols(k, i * dh, dh);
            let vh = tape.slice_cols(v, i * dh, dh);
            let s = tape.matmul_bt(qh, kh);
            let s = tape.scale(s, scale);
            let p = tape.softmax_rows(s);
            outs.push(tape.matmul(p, vh));
            attn.push(p);
        }
        let o = tape.concat_cols(&outs);
        let o = tape.matmul(o, w.proj_w);
        let o = tape.add_bias(o, w.proj_b);
        h = tape.add(h, o);

        let m = tape.layer_norm(h, w.ln2_g, w.ln2_b);
        let m = tape.matmul(m, w.fc1_w);
        let m = tape.add_bias(m, w.fc1_b);
        let m = tape.gelu(m);
        let m = tape.matmul(m, w.fc2_w);
        let m = tape.add_bias(m, w.fc2_b);
        h = tape.add(h, m);

        if !tape.value(h).is_finite() {
            return Err(DoraError::NumericOverflow { layer: b, detail: "block output".into() });
        }
        if b == tracker_block {
            traced = Some((q, k, attn));
        }
    }
    let tokens = tape.layer_norm(h, weights.norm_g, weights.norm_b);
    if !tape.value(tokens).is_finite() {
        return Err(DoraError::NumericOverflow { layer: cfg.depth, detail: "final norm".into() });
    }
    let cls = tape.slice_rows(tokens, 0, 1);
    let (queries, keys, attention) = traced.expect("tracker block is within depth");
    debug_assert_eq!(tape.value(tokens).rows(), n + 1);
    Ok(EncoderTrace { tokens, cls, queries, keys, attention })
}

pub fn output_of<T: Scalar>(tape: &Tape<T>, trace: &EncoderTrace, grid: &PatchGrid<T>) -> EncoderOutput<T> {
    EncoderOutput {
        tokens: tape.value(trace.tokens).clone(),
        queries: tape.value(trace.queries).clone(),
        keys: tape.value(trace.keys).clone(),
        attention: trace.attention.iter().map(|&a| tape.value(a).clone()).collect(),
        grid_rows: grid.rows,
        grid_cols: grid.cols,
    }
}

/// Inference forward pass. Pure: identical inputs give bitwise-identical outputs.
pub fn encode<T: Scalar>(cfg: &EncoderConfig, params: &EncoderParams<T>, frame: &Frame) -> Result<EncoderOutput<T>> {
    let grid = patchify::<T>(frame, cfg.patch)?;
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let trace = forward(cfg, &w, &mut tape, &grid)?;
    Ok(output_of(&tape, &trace, &grid))
}
