//! Frames and their patch tokenization.

use crate::error::{DoraError, Result};
use crate::tensor::{Mat, Scalar};

/// One image, `height × width × channels`, row-major with interleaved channels,
/// values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(DoraError::InvalidInput(format!("{channels} channels; expected 1 or 3")));
        }
        if data.len() != height * width * channels {
            return Err(DoraError::Shape(format!(
                "{} values for a {height}x{width}x{channels} frame",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(DoraError::InvalidInput(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        Self { height, width, channels, data: vec![v.clamp(0.0, 1.0); height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Luma per pixel (identity for single-channel frames).
    pub fn luma(&self, y: usize, x: usize) -> f32 {
        if self.channels == 1 {
            self.get(y, x, 0)
        } else {
            0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
        }
    }

    pub fn to_rgb(&self) -> Frame {
        if self.channels == 3 {
            return self.clone();
        }
        Frame::from_fn(self.height, self.width, 3, |y, x, _| self.get(y, x, 0))
    }

    /// Sub-window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Frame> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(DoraError::InvalidInput(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{} frame",
                self.height, self.width
            )));
        }
        Ok(Frame::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamped at borders.
    pub fn sample_bilinear(&self, fy: f64, fx: f64, c: usize) -> f32 {
        let (y0, y1, wy) = bilinear_taps(fy, self.height);
        let (x0, x1, wx) = bilinear_taps(fx, self.width);
        let top = self.get(y0, x0, c) as f64 * (1.0 - wx) + self.get(y0, x1, c) as f64 * wx;
        let bot = self.get(y1, x0, c) as f64 * (1.0 - wx) + self.get(y1, x1, c) as f64 * wx;
        (top * (1.0 - wy) + bot * wy) as f32
    }

    pub fn resize(&self, height: usize, width: usize) -> Frame {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Frame::from_fn(height, width, self.channels, |y, x, c| {
            self.sample_bilinear((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5, c)
        })
    }
}

/// Neighbouring indices and interpolation weight for a coordinate in `[0, len)`.
pub(crate) fn bilinear_taps(f: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let f = f.clamp(0.0, max);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, f - i0 as f64)
}

/// Non-overlapping `p × p` tokenization of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// `n × (p²·c)` patch vectors in raster order.
    pub vectors: Mat<T>,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token_position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn token_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

/// Splits a frame into `p × p` patches in raster order; each patch vector is the
/// flattened `p × p × c` block (rows, then columns, then channels).
pub fn patchify<T: Scalar>(frame: &Frame, p: usize) -> Result<PatchGrid<T>> {
    if p == 0 || frame.height % p != 0 || frame.width % p != 0 {
        return Err(DoraError::Shape(format!(
            "{}x{} frame is not divisible into {p}x{p} patches",
            frame.height, frame.width
        )));
    }
    let (rows, cols, c) = (frame.height / p, frame.width / p, frame.channels);
    let dim = p * p * c;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for gr in 0..rows {
        for gc in 0..cols {
            for dy in 0..p {
                let start = ((gr * p + dy) * frame.width + gc * p) * c;
                data.extend(frame.data[start..start + p * c].iter().map(|&v| T::lit(v as f64)));
            }
        }
    }
    Ok(PatchGrid { patch: p, rows, cols, channels: c, vectors: Mat::from_vec(rows * cols, dim, data)? })
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(grid: &PatchGrid<T>) -> Result<Frame> {
    let p = grid.patch;
    let (h, w, c) = (grid.rows * p, grid.cols * p, grid.channels);
    let mut data = vec![0.0f32; h * w * c];
    for token in 0..grid.n() {
        let (gr, gc) = grid.token_position(token);
        let v = grid.vectors.row(token);
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..c {
                    data[((gr * p + dy) * w + gc * p + dx) * c + ch] =
                        v[(dy * p + dx) * c + ch].to_f32().unwrap();
                }
            }
        }
    }
    Frame::new(h, w, c, data)
}
