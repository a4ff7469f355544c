//! Fixed-image slices with moving-image edges burned in.

use clap::ValueEnum;
use image::GrayImage;
use mplreg::volume::Volume;
use mplreg::Real;

use crate::error::{CliError, CliResult};

/// Normal axis of the slice. `Z` gives axial slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// A 2-D slice, row-major, `width` samples per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Slice {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[x + self.width * y]
    }
}

/// Extracts a slice. Rows run along the second remaining axis: for `Z` the
/// image is x by y, for `Y` it is x by z and for `X` it is y by z.
pub fn extract_slice<T: Real>(v: &Volume<T>, axis: Axis, index: usize) -> CliResult<Slice> {
    let [nx, ny, nz] = v.dims();
    let (n, width, height) = match axis {
        Axis::X => (nx, ny, nz),
        Axis::Y => (ny, nx, nz),
        Axis::Z => (nz, nx, ny),
    };
    if index >= n {
        return Err(CliError::Usage(format!("slice {index} out of range for {axis:?} extent {n}")));
    }
    let mut data = Vec::with_capacity(width * height);
    for b in 0..height {
        for a in 0..width {
            let (i, j, k) = match axis {
                Axis::X => (index, a, b),
                Axis::Y => (a, index, b),
                Axis::Z => (a, b, index),
            };
            data.push(v.get(i, j, k).as_f64());
        }
    }
    Ok(Slice { width, height, data })
}

/// Sobel gradient magnitude with clamp-to-edge borders.
pub fn sobel_magnitude(s: &Slice) -> Vec<f64> {
    let (w, h) = (s.width as isize, s.height as isize);
    let px = |x: isize, y: isize| s.at(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let mut out = Vec::with_capacity(s.data.len());
    for y in 0..h {
        for x in 0..w {
            let col = |x: isize| px(x, y - 1) + 2.0 * px(x, y) + px(x, y + 1);
            let row = |y: isize| px(x - 1, y) + 2.0 * px(x, y) + px(x + 1, y);
            let (gx, gy) = (col(x + 1) - col(x - 1), row(y + 1) - row(y - 1));
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Pixels whose Sobel magnitude is nonzero and in the top decile.
pub fn edge_mask(s: &Slice) -> Vec<bool> {
    let mag = sobel_magnitude(s);
    let mut sorted = mag.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[(0.9 * (sorted.len() - 1) as f64).floor() as usize];
    mag.iter().map(|&m| m > 0.0 && m >= threshold).collect()
}

/// Display window `[level − window/2, level + window/2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub window: f64,
    pub level: f64,
}

impl Window {
    /// The full intensity range of `s`.
    pub fn full_range(s: &Slice) -> Self {
        let lo = s.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Window { window: (hi - lo).max(f64::MIN_POSITIVE), level: 0.5 * (lo + hi) }
    }

    pub fn gray(&self, v: f64) -> u8 {
        let t = (v - (self.level - 0.5 * self.window)) / self.window;
        (t.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// The windowed fixed slice with the moving slice's edges set to 255.
pub fn render(fixed: &Slice, moving: &Slice, window: Window) -> CliResult<GrayImage> {
    if (fixed.width, fixed.height) != (moving.width, moving.height) {
        return Err(CliError::Usage(format!(
            "slice shapes differ: {}x{} vs {}x{}",
            fixed.width, fixed.height, moving.width, moving.height
        )));
    }
    if !(window.window > 0.0) {
        return Err(CliError::Usage("window must be > 0".into()));
    }
    let edges = edge_mask(moving);
    let pixels = fixed.data.iter().zip(&edges).map(|(&v, &e)| if e { u8::MAX } else { window.gray(v) }).collect();
    Ok(GrayImage::from_raw(fixed.width as u32, fixed.height as u32, pixels).expect("buffer matches shape"))
}
