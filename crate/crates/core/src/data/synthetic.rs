//! Moving-shapes videos with exact per-object ground truth, plus a still-image
//! shape classification split.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::pnm;
use crate::data::video::{frame_file_name, VideoSource};
use crate::error::{DoraError, Result};
use crate::eval::{BinaryMask, BoxRect};
use crate::frame::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }

    /// Whether the point lies inside a shape of radius `r` centered at the origin.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Disc => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
            Shape::Triangle => {
                // apex up at (-r, 0), base along dy = 0.8r
                let h = 1.8 * r;
                let t = (dy + r) / h;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
        }
    }
}

/// Circle radius (as a multiple of `r`) enclosing every shape.
const BOUNDING: f64 = 1.3;

const PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.15, 0.1],
    [0.1, 0.85, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.9, 0.1],
    [0.9, 0.2, 0.9],
    [0.1, 0.9, 0.9],
    [1.0, 0.55, 0.0],
    [1.0, 1.0, 1.0],
];

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMotion {
    pub shape: Shape,
    pub color: [f32; 3],
    pub radius: f64,
    pub start: (f64, f64),
    /// pixels per frame
    pub velocity: (f64, f64),
    /// sideways oscillation amplitude, angular frequency and phase
    pub wobble: (f64, f64, f64),
}

impl ObjectMotion {
    pub fn center(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        let (vy, vx) = self.velocity;
        let speed = (vy * vy + vx * vx).sqrt();
        let (ny, nx) = if speed > 0.0 { (vx / speed, -vy / speed) } else { (0.0, 0.0) };
        let (amp, freq, phase) = self.wobble;
        let s = amp * ((freq * t + phase).sin() - phase.sin());
        (self.start.0 + vy * t + ny * s, self.start.1 + vx * t + nx * s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub objects: usize,
    pub size: usize,
    pub frames: usize,
    /// zero velocity and wobble
    pub still: bool,
}

impl SyntheticConfig {
    pub fn new(objects: usize, size: usize, frames: usize) -> Self {
        Self { objects, size, frames, still: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub frames: Vec<Frame>,
    /// `masks[t][j]`: object `j` in frame `t`
    pub masks: Vec<Vec<BinaryMask>>,
    pub boxes: Vec<Vec<BoxRect>>,
    pub motions: Vec<ObjectMotion>,
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Frame {
    let fy = rng.random_range(0.15..0.5);
    let fx = rng.random_range(0.15..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let noise: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.04..0.04)).collect();
    Frame::from_fn(size, size, 3, |y, x, c| {
        let wave = 0.06 * ((y as f64 * fy + phase).sin() + (x as f64 * fx).cos());
        (0.4 + wave + tint[c] + noise[y * size + x]) as f32
    })
}

fn paint(frame: &mut Frame, mask: &BinaryMask, color: [f32; 3]) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                for (c, &v) in color.iter().enumerate() {
                    frame.set(y, x, c, v);
                }
            }
        }
    }
}

fn rasterize(shape: Shape, center: (f64, f64), radius: f64, size: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |y, x| shape.contains(y as f64 + 0.5 - center.0, x as f64 + 0.5 - center.1, radius))
}

fn sample_motions(cfg: &SyntheticConfig, looks: &[(Shape, [f32; 3])], rng: &mut ChaCha8Rng) -> Option<Vec<ObjectMotion>> {
    let s = cfg.size as f64;
    let mut placed: Vec<ObjectMotion> = Vec::with_capacity(cfg.objects);
    for j in 0..cfg.objects {
        let mut accepted = None;
        for _ in 0..200 {
            let radius = rng.random_range(0.09 * s..=0.14 * s).max(1.5);
            let reach = BOUNDING * radius;
            if 2.0 * reach >= s {
                return None;
            }
            let start = (rng.random_range(reach..s - reach), rng.random_range(reach..s - reach));
            let (velocity, wobble) = if cfg.still {
                ((0.0, 0.0), (0.0, 0.0, 0.0))
            } else {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let speed = rng.random_range(0.01 * s..=0.03 * s);
                let wobble = (
                    rng.random_range(0.0..=0.04 * s),
                    rng.random_range(0.3..1.2),
                    rng.random_range(0.0..std::f64::consts::TAU),
                );
                ((speed * angle.sin(), speed * angle.cos()), wobble)
            };
            let m = ObjectMotion {
                shape: looks[j].0,
                color: looks[j].1,
                radius,
                start,
                velocity,
                wobble,
            };
            let fits = (0..cfg.frames).all(|t| {
                let (cy, cx) = m.center(t);
                let inside = cy - reach >= 0.0 && cy + reach <= s && cx - reach >= 0.0 && cx + reach <= s;
                inside
                    && placed.iter().all(|o| {
                        let (oy, ox) = o.center(t);
                        let gap = BOUNDING * (o.radius + radius) + 1.0;
                        (cy - oy).powi(2) + (cx - ox).powi(2) > gap * gap
                    })
            });
            if fits {
                accepted = Some(m);
                break;
            }
        }
        placed.push(accepted?);
    }
    Some(placed)
}

/// Renders a clip of `frames` frames; deterministic by seed.
pub fn gen_synthetic_clip(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticClip> {
    if cfg.objects == 0 || cfg.frames == 0 {
        return Err(DoraError::Config("synthetic clips need at least one object and one frame".into()));
    }
    if cfg.objects > PALETTE.len() {
        return Err(DoraError::Config(format!("at most {} objects have distinct colors", PALETTE.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(cfg.size, &mut rng);
    // shapes cycle through a shuffled order; colors are distinct palette draws
    let mut order = Shape::ALL;
    order.shuffle(&mut rng);
    let mut palette = PALETTE;
    palette.shuffle(&mut rng);
    let looks: Vec<_> = (0..cfg.objects).map(|j| (order[j % 3], palette[j])).collect();
    let mut motions = None;
    for _ in 0..20 {
        if let Some(m) = sample_motions(cfg, &looks, &mut rng) {
            motions = Some(m);
            break;
        }
    }
    let motions = motions.ok_or_else(|| {
        DoraError::Data(format!("{} objects do not fit in a {s}x{s} frame", cfg.objects, s = cfg.size))
    })?;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut frame = bg.clone();
        let mut per_object = Vec::with_capacity(motions.len());
        let mut per_box = Vec::with_capacity(motions.len());
        for m in &motions {
            let mask = rasterize(m.shape, m.center(t), m.radius, cfg.size);
            let b = mask
                .tight_box()
                .ok_or_else(|| DoraError::Data(format!("object vanished at frame {t}; frame too small")))?;
            paint(&mut frame, &mask, m.color);
            per_object.push(mask);
            per_box.push(b);
        }
        frames.push(frame);
        masks.push(per_object);
        boxes.push(per_box);
    }
    Ok(SyntheticClip { frames, masks, boxes, motions })
}

/// Seed of clip `index` in a dataset generated from `seed`.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:04}")
}

pub fn mask_file_name(object: usize, frame: usize) -> String {
    format!("mask_obj{object}_{frame:06}.pgm")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub objects: usize,
    pub frames: usize,
    pub seed: u64,
}

/// Writes `clips/<id>/…` and `manifest.txt` under `out`.
pub fn write_dataset(out: &Path, clips: usize, cfg: &SyntheticConfig, seed: u64) -> Result<Vec<ManifestEntry>> {
    let mut manifest = String::new();
    let mut entries = Vec::with_capacity(clips);
    for i in 0..clips {
        let entry = ManifestEntry { clip_id: clip_id(i), objects: cfg.objects, frames: cfg.frames, seed: clip_seed(seed, i) };
        let clip = gen_synthetic_clip(cfg, entry.seed)?;
        let dir = out.join("clips").join(&entry.clip_id);
        fs::create_dir_all(&dir).map_err(|e| DoraError::io(&dir, e))?;
        for (t, frame) in clip.frames.iter().enumerate() {
            pnm::write(&dir.join(frame_file_name(t)), frame)?;
            for (j, mask) in clip.masks[t].iter().enumerate() {
                pnm::write(&dir.join(mask_file_name(j, t)), &mask.to_frame())?;
            }
        }
        manifest.push_str(&format!("{} {} {} {}\n", entry.clip_id, entry.objects, entry.frames, entry.seed));
        entries.push(entry);
    }
    let path = out.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| DoraError::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| DoraError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || DoraError::Data(format!("bad manifest line {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                clip_id: f[0].to_string(),
                objects: f[1].parse().map_err(|_| bad())?,
                frames: f[2].parse().map_err(|_| bad())?,
                seed: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn open_clip(root: &Path, entry: &ManifestEntry) -> Result<VideoSource> {
    VideoSource::from_dir(&root.join("clips").join(&entry.clip_id), Vec::new())
}

/// Ground-truth masks of one frame, read back from disk.
pub fn read_masks(root: &Path, entry: &ManifestEntry, frame: usize) -> Result<Vec<BinaryMask>> {
    let dir = root.join("clips").join(&entry.clip_id);
    (0..entry.objects)
        .map(|j| pnm::read_pgm(&dir.join(mask_file_name(j, frame))).map(|f| BinaryMask::from_frame(&f)))
        .collect()
}

/// Labeled single-shape images; label is [`Shape::class_id`].
pub fn gen_shape_images(count: usize, size: usize, seed: u64) -> Result<Vec<(Frame, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    (0..count)
        .map(|_| {
            let shape = Shape::ALL[rng.random_range(0..3)];
            let radius = rng.random_range(0.18 * s..=0.3 * s);
            let reach = BOUNDING * radius;
            if 2.0 * reach >= s {
                return Err(DoraError::Config(format!("{size}px images are too small for shapes")));
            }
            let center = (rng.random_range(reach..s - reach), rng.random_range(reach..s - reach));
            let color = PALETTE[rng.random_range(0..PALETTE.len())];
            let mut frame = background(size, &mut rng);
            paint(&mut frame, &rasterize(shape, center, radius, size), color);
            Ok((frame, shape.class_id()))
        })
        .collect()
}

/// Writes labeled shape images as `img_%06d.ppm` plus `labels.txt`
/// (`<file> <class>` per line) under `dir`.
pub fn write_shape_split(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DoraError::io(dir, e))?;
    let mut labels = String::new();
    for (i, (frame, label)) in gen_shape_images(count, size, seed)?.iter().enumerate() {
        let name = format!("img_{i:06}.ppm");
        pnm::write(&dir.join(&name), frame)?;
        labels.push_str(&format!("{name} {label}\n"));
    }
    let path = dir.join("labels.txt");
    fs::write(&path, labels).map_err(|e| DoraError::io(&path, e))
}

/// Reads a split written by [`write_shape_split`].
pub fn read_shape_split(dir: &Path) -> Result<Vec<(Frame, usize)>> {
    let path = dir.join("labels.txt");
    let text = fs::read_to_string(&path).map_err(|e| DoraError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || DoraError::Data(format!("bad label line {line:?} in {}", path.display()));
            let (name, label) = line.trim().split_once(char::is_whitespace).ok_or_else(bad)?;
            let label = label.trim().parse().map_err(|_| bad())?;
            Ok((pnm::read(&dir.join(name))?, label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn shape_split_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_shape_split(dir.path(), 5, 32, 9).unwrap();
        let back = read_shape_split(dir.path()).unwrap();
        let direct = gen_shape_images(5, 32, 9).unwrap();
        assert_eq!(back.len(), 5);
        for ((f, l), (g, m)) in back.iter().zip(&direct) {
            assert_eq!(l, m);
            assert!(f.data().iter().zip(g.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }

    use super::*;

    fn scan_box(mask: &BinaryMask) -> BoxRect {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        BoxRect::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn still_single_object_has_fixed_mask() {
        let cfg = SyntheticConfig { still: true, ..SyntheticConfig::new(1, 64, 5) };
        let clip = gen_synthetic_clip(&cfg, 7).unwrap();
        assert!(clip.masks.iter().all(|m| m[0] == clip.masks[0][0]));
    }

    #[test]
    fn masks_disjoint_and_boxes_tight() {
        for seed in 0..20 {
            let clip = gen_synthetic_clip(&SyntheticConfig::new(3, 64, 4), seed).unwrap();
            for (masks, boxes) in clip.masks.iter().zip(&clip.boxes) {
                for y in 0..64 {
                    for x in 0..64 {
                        assert!(masks.iter().filter(|m| m.get(y, x)).count() <= 1);
                    }
                }
                for (m, b) in masks.iter().zip(boxes) {
                    assert!(m.count() > 0);
                    assert_eq!(*b, scan_box(m));
                }
            }
        }
    }

    #[test]
    fn objects_move_and_output_is_seeded() {
        let cfg = SyntheticConfig::new(3, 64, 4);
        let a = gen_synthetic_clip(&cfg, 11).unwrap();
        assert_eq!(a, gen_synthetic_clip(&cfg, 11).unwrap());
        assert_ne!(a.masks[0], a.masks[3]);
    }

    #[test]
    fn overcrowded_is_an_error() {
        assert!(matches!(gen_synthetic_clip(&SyntheticConfig::new(8, 12, 4), 0), Err(DoraError::Data(_))));
        assert!(gen_synthetic_clip(&SyntheticConfig::new(9, 64, 4), 0).is_err());
    }

    #[test]
    fn shape_membership() {
        assert!(Shape::Disc.contains(0.0, 0.0, 2.0));
        assert!(!Shape::Disc.contains(1.5, 1.5, 2.0));
        assert!(Shape::Square.contains(1.5, 1.5, 2.0));
        assert!(!Shape::Triangle.contains(-1.9, 0.9, 2.0));
        assert!(Shape::Triangle.contains(1.5, 1.5, 2.0));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::new(2, 32, 3);
        let entries = write_dataset(dir.path(), 2, &cfg, 5).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);
        let clip = gen_synthetic_clip(&cfg, entries[1].seed).unwrap();
        let src = open_clip(dir.path(), &entries[1]).unwrap();
        assert_eq!(src.frame_count(), 3);
        assert_eq!(read_masks(dir.path(), &entries[1], 2).unwrap(), clip.masks[2]);
        let f = src.frame(1).unwrap();
        let diff = f.data().iter().zip(clip.frames[1].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn shape_split_labels_cover_classes() {
        let imgs = gen_shape_images(60, 32, 1).unwrap();
        for c in 0..3 {
            assert!(imgs.iter().any(|(_, l)| *l == c));
        }
    }
}
