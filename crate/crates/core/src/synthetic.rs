//! Procedural frame pairs with known motion.

use crate::imaging::{Image, ImagingError};

/// Two frames and the per-pixel motion of frame 0 into frame 1.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub frame0: Image,
    pub frame1: Image,
    pub truth: Vec<[f64; 2]>,
}

/// Smooth band-limited texture in `[0.2, 0.8]`.
pub fn texture(x: f64, y: f64) -> f64 {
    0.5 + 0.12 * (0.31 * x + 0.17 * y).sin()
        + 0.1 * (0.23 * y - 0.11 * x + 1.3).cos()
        + 0.08 * (0.47 * x + 0.05 * y + 0.7).sin() * (0.39 * y + 0.4).cos()
}

/// Texture carried by the moving square, distinct from the background.
fn square_texture(x: f64, y: f64) -> f64 {
    0.5 + 0.15 * (0.6 * x + 0.4 * y).cos() + 0.12 * (0.5 * y - 0.3 * x).sin()
}

/// Whole-frame translation of the background texture by `(dx, dy)`.
pub fn shifted_texture(width: usize, height: usize, dx: f64, dy: f64) -> Result<SyntheticPair, ImagingError> {
    let frame0 = Image::from_fn(width, height, |x, y| texture(x as f64, y as f64))?;
    let frame1 = Image::from_fn(width, height, |x, y| texture(x as f64 - dx, y as f64 - dy))?;
    Ok(SyntheticPair { frame0, frame1, truth: vec![[dx, dy]; width * height] })
}

/// A textured square of side `side` centred in a static textured
/// background, translated by `(dx, dy)` between the frames.
pub fn translating_square(
    width: usize,
    height: usize,
    side: usize,
    dx: f64,
    dy: f64,
) -> Result<SyntheticPair, ImagingError> {
    let x0 = (width.saturating_sub(side) / 2) as f64;
    let y0 = (height.saturating_sub(side) / 2) as f64;
    let s = side as f64;
    let inside = |x: f64, y: f64| x >= x0 && x < x0 + s && y >= y0 && y < y0 + s;
    let sample = |x: f64, y: f64, sx: f64, sy: f64| {
        if inside(x - sx, y - sy) {
            square_texture(x - sx, y - sy)
        } else {
            texture(x, y)
        }
    };
    let frame0 = Image::from_fn(width, height, |x, y| sample(x as f64, y as f64, 0.0, 0.0))?;
    let frame1 = Image::from_fn(width, height, |x, y| sample(x as f64, y as f64, dx, dy))?;
    let mut truth = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            truth.push(if inside(x as f64, y as f64) { [dx, dy] } else { [0.0, 0.0] });
        }
    }
    Ok(SyntheticPair { frame0, frame1, truth })
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` of the square drawn by
/// [`translating_square`] in frame 0.
pub fn square_bounds(width: usize, height: usize, side: usize) -> (usize, usize, usize, usize) {
    let x0 = width.saturating_sub(side) / 2;
    let y0 = height.saturating_sub(side) / 2;
    (x0, y0, (x0 + side).min(width), (y0 + side).min(height))
}

impl SyntheticPair {
    /// Multiplies frame 0 by `gain`, clamping to `[0, 1]`.
    pub fn with_gain(mut self, gain: f64) -> Self {
        self.frame0 = self.frame0.scaled_clamped(gain);
        self
    }
}
