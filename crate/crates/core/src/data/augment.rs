//! Base crop and multi-crop view generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DoraError, Result};
use crate::frame::Frame;

/// Square window of a frame, chosen once per clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

/// Uniformly placed `size × size` window inside a `height × width` frame.
pub fn choose_crop_window(height: usize, width: usize, size: usize, seed: u64) -> Result<CropWindow> {
    if size == 0 || height < size || width < size {
        return Err(DoraError::Data(format!("{height}x{width} frame is smaller than the {size}x{size} crop")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(CropWindow { y0: rng.random_range(0..=height - size), x0: rng.random_range(0..=width - size), size })
}

pub fn base_crop(frame: &Frame, window: CropWindow) -> Result<Frame> {
    if frame.height() < window.size || frame.width() < window.size {
        return Err(DoraError::Data(format!(
            "{}x{} frame is smaller than the {s}x{s} crop",
            frame.height(),
            frame.width(),
            s = window.size
        )));
    }
    frame.crop(window.y0, window.x0, window.size, window.size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub local_count: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global_size: 64,
            local_size: 32,
            local_count: 6,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            grayscale_prob: 0.2,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        let range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if self.local_size == 0 || self.local_size >= self.global_size {
            return Err(DoraError::Config("local views must be strictly smaller than global views".into()));
        }
        if !range(self.global_scale) || !range(self.local_scale) || !range(self.ratio) {
            return Err(DoraError::Config("crop scale and ratio ranges must be positive and ordered".into()));
        }
        if self.global_scale.1 > 1.0 || self.local_scale.1 > 1.0 {
            return Err(DoraError::Config("crop scale above 1".into()));
        }
        if ![self.flip_prob, self.jitter_prob, self.grayscale_prob].into_iter().all(unit) {
            return Err(DoraError::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Crop rectangle in base-crop pixel units (edges, not centers).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub y: f64,
    pub x: f64,
    pub h: f64,
    pub w: f64,
}

/// Where a view came from: enough to map any view coordinate back to the base crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewGeometry {
    pub crop: CropBox,
    pub flipped: bool,
    pub size: usize,
}

impl ViewGeometry {
    /// View pixel-center coordinates to base-crop pixel-center coordinates.
    pub fn to_base(&self, vy: f64, vx: f64) -> (f64, f64) {
        let n = self.size as f64;
        let vx = if self.flipped { n - 1.0 - vx } else { vx };
        (
            self.crop.y + (vy + 0.5) * self.crop.h / n - 0.5,
            self.crop.x + (vx + 0.5) * self.crop.w / n - 0.5,
        )
    }

    pub fn to_view(&self, by: f64, bx: f64) -> (f64, f64) {
        let n = self.size as f64;
        let vy = (by + 0.5 - self.crop.y) * n / self.crop.h - 0.5;
        let vx = (bx + 0.5 - self.crop.x) * n / self.crop.w - 0.5;
        (vy, if self.flipped { n - 1.0 - vx } else { vx })
    }

    /// Base-crop position of the center of patch `(row, col)` of size `patch`.
    pub fn patch_center_in_base(&self, row: usize, col: usize, patch: usize) -> (f64, f64) {
        let c = |i: usize| (i * patch) as f64 + (patch as f64 - 1.0) / 2.0;
        self.to_base(c(row), c(col))
    }
}

/// Photometric choices made for one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorOps {
    /// Brightness, contrast and saturation factors, when jitter fired.
    pub jitter: Option<(f64, f64, f64)>,
    pub grayscale: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub frame: Frame,
    pub geometry: ViewGeometry,
    pub color: ColorOps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub seed: u64,
    pub globals: Vec<View>,
    pub locals: Vec<View>,
}

fn random_resized_box<R: Rng>(rng: &mut R, side: usize, scale: (f64, f64), ratio: (f64, f64)) -> CropBox {
    let s = side as f64;
    let area = s * s;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let log_ratio = rng.random_range(ratio.0.ln()..=ratio.1.ln());
        let aspect = log_ratio.exp();
        let w = (target * aspect).sqrt().round();
        let h = (target / aspect).sqrt().round();
        if w >= 1.0 && h >= 1.0 && w <= s && h <= s {
            let y = rng.random_range(0..=(side - h as usize)) as f64;
            let x = rng.random_range(0..=(side - w as usize)) as f64;
            return CropBox { y, x, h, w };
        }
    }
    CropBox { y: 0.0, x: 0.0, h: s, w: s }
}

fn render(base: &Frame, geom: &ViewGeometry) -> Frame {
    Frame::from_fn(geom.size, geom.size, base.channels(), |y, x, c| {
        let (by, bx) = geom.to_base(y as f64, x as f64);
        base.sample_bilinear(by, bx, c)
    })
}

fn gray_of(px: &[f32]) -> f32 {
    if px.len() == 3 {
        0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
    } else {
        px[0]
    }
}

fn color_ops<R: Rng>(rng: &mut R, cfg: &ViewConfig) -> ColorOps {
    let factor = |rng: &mut R, amount: f64| rng.random_range((1.0 - amount).max(0.0)..=1.0 + amount);
    let jitter = if rng.random_bool(cfg.jitter_prob) {
        let b = factor(rng, cfg.brightness);
        let c = factor(rng, cfg.contrast);
        let s = factor(rng, cfg.saturation);
        Some((b, c, s))
    } else {
        None
    };
    ColorOps { jitter, grayscale: rng.random_bool(cfg.grayscale_prob) }
}

/// Applies jitter then grayscale; output stays in `[0, 1]`.
pub fn apply_color(frame: &Frame, ops: &ColorOps) -> Frame {
    let ch = frame.channels();
    let mut data = frame.data().to_vec();
    if let Some((b, c, s)) = ops.jitter {
        let (b, c, s) = (b as f32, c as f32, s as f32);
        for v in data.iter_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }
        let mean = data.chunks(ch).map(gray_of).sum::<f32>() / (data.len() / ch) as f32;
        for v in data.iter_mut() {
            *v = ((*v - mean) * c + mean).clamp(0.0, 1.0);
        }
        if ch == 3 {
            for px in data.chunks_mut(3) {
                let g = gray_of(px);
                for v in px.iter_mut() {
                    *v = ((*v - g) * s + g).clamp(0.0, 1.0);
                }
            }
        }
    }
    if ops.grayscale && ch == 3 {
        for px in data.chunks_mut(3) {
            let g = gray_of(px).clamp(0.0, 1.0);
            px.fill(g);
        }
    }
    Frame::from_fn(frame.height(), frame.width(), ch, |y, x, k| data[(y * frame.width() + x) * ch + k])
}

fn make_view<R: Rng>(rng: &mut R, base: &Frame, cfg: &ViewConfig, size: usize, scale: (f64, f64)) -> View {
    let crop = random_resized_box(rng, base.height().min(base.width()), scale, cfg.ratio);
    let flipped = rng.random_bool(cfg.flip_prob);
    let geometry = ViewGeometry { crop, flipped, size };
    let color = color_ops(rng, cfg);
    View { frame: apply_color(&render(base, &geometry), &color), geometry, color }
}

/// Two global and `local_count` local views of a square base crop.
pub fn make_views(base: &Frame, cfg: &ViewConfig, seed: u64) -> Result<ViewSet> {
    cfg.validate()?;
    if base.height() != base.width() {
        return Err(DoraError::InvalidInput(format!("base crop {}x{} is not square", base.height(), base.width())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let globals = (0..2).map(|_| make_view(&mut rng, base, cfg, cfg.global_size, cfg.global_scale)).collect();
    let locals = (0..cfg.local_count)
        .map(|_| make_view(&mut rng, base, cfg, cfg.local_size, cfg.local_scale))
        .collect();
    Ok(ViewSet { seed, globals, locals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn textured(size: usize) -> Frame {
        Frame::from_fn(size, size, 3, |y, x, c| ((y * 7 + x * 3 + c * 11) % 17) as f32 / 16.0)
    }

    #[test]
    fn exact_size_is_identity() {
        let f = textured(30);
        let w = choose_crop_window(30, 30, 30, 9).unwrap();
        assert_eq!(w, CropWindow { y0: 0, x0: 0, size: 30 });
        assert_eq!(base_crop(&f, w).unwrap(), f);
    }

    #[test]
    fn top_left_window_copies_pixels() {
        let f = textured(40);
        let c = base_crop(&f, CropWindow { y0: 0, x0: 0, size: 25 }).unwrap();
        for y in 0..25 {
            for x in 0..25 {
                for k in 0..3 {
                    assert_eq!(c.get(y, x, k), f.get(y, x, k));
                }
            }
        }
    }

    #[test]
    fn window_is_seeded_and_errors_when_small() {
        assert_eq!(choose_crop_window(90, 120, 64, 5).unwrap(), choose_crop_window(90, 120, 64, 5).unwrap());
        assert!(choose_crop_window(63, 120, 64, 5).is_err());
        assert!(base_crop(&textured(20), CropWindow { y0: 0, x0: 0, size: 21 }).is_err());
    }

    #[test]
    fn view_set_shape_and_determinism() {
        let base = textured(80);
        let cfg = ViewConfig::default();
        let a = make_views(&base, &cfg, 3).unwrap();
        assert_eq!(a.globals.len(), 2);
        assert_eq!(a.locals.len(), 6);
        assert!(a.globals.iter().all(|v| v.frame.height() == 64 && v.frame.width() == 64));
        assert!(a.locals.iter().all(|v| v.frame.height() == 32));
        assert_eq!(a, make_views(&base, &cfg, 3).unwrap());
        assert_ne!(a, make_views(&base, &cfg, 4).unwrap());
    }

    #[test]
    fn crop_areas_respect_scale_ranges() {
        let base = textured(100);
        let cfg = ViewConfig::default();
        for seed in 0..200 {
            let vs = make_views(&base, &cfg, seed).unwrap();
            for (views, (lo, hi)) in [(&vs.globals, cfg.global_scale), (&vs.locals, cfg.local_scale)] {
                for v in views {
                    let frac = v.geometry.crop.h * v.geometry.crop.w / 10_000.0;
                    let full = v.geometry.crop.h == 100.0 && v.geometry.crop.w == 100.0;
                    // integer rounding of the sides moves the area by at most ~2 rows
                    assert!(full || (frac >= lo - 0.03 && frac <= hi + 0.03), "{frac} not in [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn unflipped_full_view_reproduces_base() {
        let base = textured(32);
        let geom = ViewGeometry { crop: CropBox { y: 0.0, x: 0.0, h: 32.0, w: 32.0 }, flipped: false, size: 32 };
        assert_eq!(render(&base, &geom), base);
        let flipped = render(&base, &ViewGeometry { flipped: true, ..geom });
        assert_eq!(flipped.get(3, 0, 1), base.get(3, 31, 1));
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let f = textured(4);
        let g = apply_color(&f, &ColorOps { jitter: None, grayscale: true });
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(g.get(y, x, 0), g.get(y, x, 2));
            }
        }
    }

    proptest! {
        #[test]
        fn views_stay_in_unit_range(seed in any::<u64>()) {
            let base = Frame::from_fn(40, 40, 3, |y, x, c| if (y + x + c) % 2 == 0 { 1.0 } else { 0.0 });
            let cfg = ViewConfig { jitter_prob: 1.0, brightness: 0.9, contrast: 0.9, saturation: 0.9, ..ViewConfig::default() };
            let vs = make_views(&base, &cfg, seed).unwrap();
            for v in vs.globals.iter().chain(&vs.locals) {
                prop_assert!(v.frame.data().iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }

        #[test]
        fn geometry_round_trips(seed in any::<u64>(), row in 0usize..8, col in 0usize..8) {
            let vs = make_views(&textured(90), &ViewConfig::default(), seed).unwrap();
            for v in vs.globals.iter() {
                let g = v.geometry;
                let (by, bx) = g.patch_center_in_base(row, col, 8);
                let (vy, vx) = g.to_view(by, bx);
                prop_assert!((vy - (row * 8) as f64 - 3.5).abs() < 1e-9);
                prop_assert!((vx - (col * 8) as f64 - 3.5).abs() < 1e-9);
                prop_assert!(by > -1.0 && by < 90.0 && bx > -1.0 && bx < 90.0);
            }
        }
    }
}
