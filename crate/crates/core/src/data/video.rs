//! Frame sources and clip sampling.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::pnm;
use crate::error::{DoraError, Result};
use crate::frame::Frame;

/// File name of frame `index` inside a frame directory.
pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

#[derive(Clone, Debug)]
enum FrameStore {
    Directory(PathBuf),
    Memory(Arc<Vec<Frame>>),
}

/// A decoded video: numbered frames plus an optional sorted list of shot cuts.
#[derive(Clone, Debug)]
pub struct VideoSource {
    frame_count: usize,
    pub fps: f64,
    cuts: Vec<usize>,
    store: FrameStore,
}

fn validate_cuts(cuts: &[usize], frame_count: usize) -> Result<()> {
    if cuts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DoraError::Data("cut indices must be strictly increasing".into()));
    }
    if let Some(&last) = cuts.last() {
        if last >= frame_count {
            return Err(DoraError::Data(format!("cut {last} beyond {frame_count} frames")));
        }
    }
    Ok(())
}

impl VideoSource {
    pub fn in_memory(frames: Vec<Frame>, cuts: Vec<usize>) -> Result<Self> {
        validate_cuts(&cuts, frames.len())?;
        Ok(Self { frame_count: frames.len(), fps: 30.0, cuts, store: FrameStore::Memory(Arc::new(frames)) })
    }

    /// Frame count only; for sampling experiments that never decode pixels.
    pub fn virtual_video(frame_count: usize, cuts: Vec<usize>) -> Result<Self> {
        validate_cuts(&cuts, frame_count)?;
        Ok(Self { frame_count, fps: 30.0, cuts, store: FrameStore::Memory(Arc::new(Vec::new())) })
    }

    /// Indexes `frame_000000.ppm, frame_000001.ppm, …` in `dir`; numbering must
    /// start at 0 and be contiguous.
    pub fn from_dir(dir: &Path, cuts: Vec<usize>) -> Result<Self> {
        if !dir.is_dir() {
            return Err(DoraError::Data(format!("{} is not a directory", dir.display())));
        }
        let mut count = 0;
        while dir.join(frame_file_name(count)).is_file() {
            count += 1;
        }
        if count == 0 {
            return Err(DoraError::Data(format!("no frame_000000.ppm in {}", dir.display())));
        }
        validate_cuts(&cuts, count)?;
        Ok(Self { frame_count: count, fps: 30.0, cuts, store: FrameStore::Directory(dir.to_path_buf()) })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn cuts(&self) -> &[usize] {
        &self.cuts
    }

    pub fn frame(&self, index: usize) -> Result<Frame> {
        if index >= self.frame_count {
            return Err(DoraError::Data(format!("frame {index} out of {}", self.frame_count)));
        }
        match &self.store {
            FrameStore::Directory(dir) => pnm::read_ppm(&dir.join(frame_file_name(index))),
            FrameStore::Memory(frames) => frames
                .get(index)
                .cloned()
                .ok_or_else(|| DoraError::Data("virtual video has no pixels".into())),
        }
    }
}

/// Parses a cut list: one frame index per line, sorted.
pub fn parse_cut_list(text: &str) -> Result<Vec<usize>> {
    let cuts = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<usize>().map_err(|_| DoraError::Data(format!("bad cut index {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    validate_cuts(&cuts, usize::MAX)?;
    Ok(cuts)
}

pub fn read_cut_list(path: &Path) -> Result<Vec<usize>> {
    parse_cut_list(&fs::read_to_string(path).map_err(|e| DoraError::io(path, e))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipSpec {
    pub start: usize,
    pub frames: usize,
    pub stride: usize,
}

impl ClipSpec {
    pub fn last(&self) -> usize {
        self.start + (self.frames - 1) * self.stride
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.frames).map(|i| self.start + i * self.stride).collect()
    }

    /// True when some cut index lies in `[start, last]`.
    pub fn spans_cut(&self, cuts: &[usize]) -> bool {
        let first = cuts.partition_point(|&c| c < self.start);
        cuts.get(first).is_some_and(|&c| c <= self.last())
    }
}

fn last_valid_start(src: &VideoSource, frames: usize, stride: usize) -> Result<usize> {
    if frames == 0 || stride == 0 {
        return Err(DoraError::Config("clips need at least one frame and a positive stride".into()));
    }
    let span = (frames - 1) * stride;
    if span >= src.frame_count() {
        return Err(DoraError::Data(format!(
            "{} frames cannot hold a clip of {frames} frames with stride {stride}",
            src.frame_count()
        )));
    }
    Ok(src.frame_count() - 1 - span)
}

/// Uniformly random clip start; reproducible by seed.
pub fn sample_clip(src: &VideoSource, frames: usize, stride: usize, seed: u64) -> Result<ClipSpec> {
    let max_start = last_valid_start(src, frames, stride)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ClipSpec { start: rng.random_range(0..=max_start), frames, stride })
}

const CUT_REJECTION_TRIES: usize = 64;

/// Like [`sample_clip`] but never returns a clip whose span contains a cut.
///
/// Rejection sampling first; if every try lands on a cut the valid starts are
/// enumerated and one is drawn uniformly. Either way the result is uniform
/// over valid starts.
pub fn sample_clip_cut_aware(src: &VideoSource, frames: usize, stride: usize, seed: u64) -> Result<ClipSpec> {
    let max_start = last_valid_start(src, frames, stride)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..CUT_REJECTION_TRIES {
        let clip = ClipSpec { start: rng.random_range(0..=max_start), frames, stride };
        if !clip.spans_cut(src.cuts()) {
            return Ok(clip);
        }
    }
    let valid: Vec<usize> = (0..=max_start)
        .filter(|&s| !ClipSpec { start: s, frames, stride }.spans_cut(src.cuts()))
        .collect();
    if valid.is_empty() {
        return Err(DoraError::Exhausted(format!(
            "every {frames}-frame clip with stride {stride} crosses a cut"
        )));
    }
    Ok(ClipSpec { start: valid[rng.random_range(0..valid.len())], frames, stride })
}
