//! Frame loading, Gaussian smoothing, spatio-temporal derivatives and the
//! smoothed data-term tensor.
//!
//! Intensities are normalized to `[0, 1]` on load. All grids are stored
//! row-major with `x` along columns and `y` along rows.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("unreadable file {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("image must be at least 2x2, got {width}x{height}")]
    TooSmall { width: usize, height: usize },
    #[error("data length {len} does not match {width}x{height}")]
    LengthMismatch { len: usize, width: usize, height: usize },
    #[error("non-finite pixel value at index {0}")]
    NonFinite(usize),
    #[error("negative smoothing scale {0}")]
    NegativeSigma(f64),
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Scalar brightness field on a `width x height` pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImagingError> {
        if width < 2 || height < 2 {
            return Err(ImagingError::TooSmall { width, height });
        }
        if data.len() != width * height {
            return Err(ImagingError::LengthMismatch { len: data.len(), width, height });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImagingError::NonFinite(i));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, ImagingError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self, ImagingError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Multiplies every pixel by `gain` and clamps to `[0, 1]`.
    pub fn scaled_clamped(&self, gain: f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| (v * gain).clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Loads a grayscale raster (PGM P5 or PNG) and rescales it to `[0, 1]`.
///
/// Color PNGs are reduced to luminance `0.299 R + 0.587 G + 0.114 B`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImagingError> {
    let path = path.as_ref();
    let unreadable = |reason: String| ImagingError::Unreadable { path: path.display().to_string(), reason };
    let bytes = std::fs::read(path).map_err(|e| unreadable(e.to_string()))?;
    let format = image::guess_format(&bytes).map_err(|_| ImagingError::Unsupported(path.display().to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(ImagingError::Unsupported(format!("{format:?}")));
    }
    let decoded = image::load_from_memory_with_format(&bytes, format).map_err(|e| unreadable(e.to_string()))?;
    decode_dynamic(decoded)
}

/// Decodes an in-memory PNG or PGM buffer.
pub fn decode_image(bytes: &[u8]) -> Result<Image, ImagingError> {
    let decoded = image::load_from_memory(bytes)
        .map_err(|e| ImagingError::Unreadable { path: "<memory>".into(), reason: e.to_string() })?;
    decode_dynamic(decoded)
}

fn decode_dynamic(decoded: image::DynamicImage) -> Result<Image, ImagingError> {
    use image::DynamicImage as D;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(ImagingError::TooSmall { width: w, height: h });
    }
    let luminance = |r: f64, g: f64, b: f64| 0.299 * r + 0.587 * g + 0.114 * b;
    let data: Vec<f64> = match decoded {
        D::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        D::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        D::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        D::ImageLumaA16(buf) => buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        D::ImageRgb8(buf) => {
            buf.pixels().map(|p| luminance(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 255.0).collect()
        }
        D::ImageRgba8(buf) => {
            buf.pixels().map(|p| luminance(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 255.0).collect()
        }
        D::ImageRgb16(buf) => {
            buf.pixels().map(|p| luminance(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 65535.0).collect()
        }
        D::ImageRgba16(buf) => {
            buf.pixels().map(|p| luminance(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 65535.0).collect()
        }
        other => return Err(ImagingError::Unsupported(format!("{:?}", other.color()))),
    };
    Image::new(w, h, data)
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n - 1`, periodic with
/// period `2n` so arbitrarily wide kernels stay in range.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Normalized Gaussian weights for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut weights: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

fn convolve_plane(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * row[reflect(x as isize + k as isize - radius, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * tmp[reflect(y as isize + k as isize - radius, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Separable Gaussian convolution with reflecting borders. `sigma = 0`
/// returns the input unchanged.
pub fn gaussian_smooth(img: &Image, sigma: f64) -> Result<Image, ImagingError> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(ImagingError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let data = convolve_plane(&img.data, img.width, img.height, sigma);
    Ok(Image { width: img.width, height: img.height, data })
}

/// Spatial derivatives of the frame average, temporal difference, and the
/// first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeField {
    pub width: usize,
    pub height: usize,
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    pub ft: Vec<f64>,
    pub f: Vec<f64>,
}

/// Central differences of `(f0 + f1) / 2` (one-sided at the border),
/// `f_t = f1 - f0`, `f = f0`. Both frames are expected to be pre-smoothed.
pub fn compute_derivatives(f0: &Image, f1: &Image) -> Result<DerivativeField, ImagingError> {
    if f0.width != f1.width || f0.height != f1.height {
        return Err(ImagingError::DimensionMismatch(f0.width, f0.height, f1.width, f1.height));
    }
    let (w, h) = (f0.width, f0.height);
    let avg: Vec<f64> = f0.data.iter().zip(&f1.data).map(|(a, b)| 0.5 * (a + b)).collect();
    let at = |x: usize, y: usize| avg[y * w + x];
    let mut fx = vec![0.0; w * h];
    let mut fy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            fx[i] = if x == 0 {
                at(1, y) - at(0, y)
            } else if x == w - 1 {
                at(w - 1, y) - at(w - 2, y)
            } else {
                0.5 * (at(x + 1, y) - at(x - 1, y))
            };
            fy[i] = if y == 0 {
                at(x, 1) - at(x, 0)
            } else if y == h - 1 {
                at(x, h - 1) - at(x, h - 2)
            } else {
                0.5 * (at(x, y + 1) - at(x, y - 1))
            };
        }
    }
    let ft = f1.data.iter().zip(&f0.data).map(|(b, a)| b - a).collect();
    Ok(DerivativeField { width: w, height: h, fx, fy, ft, f: f0.data.clone() })
}

/// Index of each upper-triangle entry of the symmetric data tensor.
pub const A11: usize = 0;
pub const A12: usize = 1;
pub const A13: usize = 2;
pub const A22: usize = 3;
pub const A23: usize = 4;
pub const A33: usize = 5;

/// Per-pixel smoothed data tensor and load of the coupled flow/illumination
/// system, plus the smoothed `f_t^2` that completes the quadratic energy.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTerms {
    width: usize,
    height: usize,
    tensor: Vec<[f64; 6]>,
    load: Vec<[f64; 3]>,
    ft2: Vec<f64>,
}

impl DataTerms {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Upper-triangle entries `(a11, a12, a13, a22, a23, a33)` at pixel `i`.
    pub fn tensor(&self, i: usize) -> &[f64; 6] {
        &self.tensor[i]
    }

    pub fn load(&self, i: usize) -> &[f64; 3] {
        &self.load[i]
    }

    pub fn ft2(&self, i: usize) -> f64 {
        self.ft2[i]
    }

    /// Full symmetric 3x3 tensor at pixel `i`, row-major.
    pub fn full_tensor(&self, i: usize) -> [[f64; 3]; 3] {
        let t = &self.tensor[i];
        [[t[A11], t[A12], t[A13]], [t[A12], t[A22], t[A23]], [t[A13], t[A23], t[A33]]]
    }

    /// Builds terms directly from per-pixel values; used for synthetic
    /// problems and windowing.
    pub fn from_parts(width: usize, height: usize, tensor: Vec<[f64; 6]>, load: Vec<[f64; 3]>, ft2: Vec<f64>) -> Self {
        assert_eq!(tensor.len(), width * height);
        assert_eq!(load.len(), width * height);
        assert_eq!(ft2.len(), width * height);
        Self { width, height, tensor, load, ft2 }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self::from_parts(width, height, vec![[0.0; 6]; n], vec![[0.0; 3]; n], vec![0.0; n])
    }

    /// Restriction to the half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    pub fn window(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> DataTerms {
        let (w, h) = (x1 - x0, y1 - y0);
        let mut tensor = Vec::with_capacity(w * h);
        let mut load = Vec::with_capacity(w * h);
        let mut ft2 = Vec::with_capacity(w * h);
        for y in y0..y1 {
            let row = y * self.width;
            tensor.extend_from_slice(&self.tensor[row + x0..row + x1]);
            load.extend_from_slice(&self.load[row + x0..row + x1]);
            ft2.extend_from_slice(&self.ft2[row + x0..row + x1]);
        }
        DataTerms { width: w, height: h, tensor, load, ft2 }
    }
}

/// Smooths every product field with `K_rho`:
/// `A = K*[[fx fx, fx fy, -fx f], [., fy fy, -fy f], [., ., f f]]`,
/// `F = K*(-fx ft, -fy ft, f ft)`.
pub fn build_data_terms(d: &DerivativeField, rho: f64) -> Result<DataTerms, ImagingError> {
    if rho.is_nan() || rho < 0.0 {
        return Err(ImagingError::NegativeSigma(rho));
    }
    let (w, h) = (d.width, d.height);
    let product = |g: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let raw: Vec<f64> = (0..w * h).map(g).collect();
        if rho == 0.0 {
            raw
        } else {
            convolve_plane(&raw, w, h, rho)
        }
    };
    let a11 = product(&|i| d.fx[i] * d.fx[i]);
    let a12 = product(&|i| d.fx[i] * d.fy[i]);
    let a13 = product(&|i| -d.fx[i] * d.f[i]);
    let a22 = product(&|i| d.fy[i] * d.fy[i]);
    let a23 = product(&|i| -d.fy[i] * d.f[i]);
    let a33 = product(&|i| d.f[i] * d.f[i]);
    let f1 = product(&|i| -d.fx[i] * d.ft[i]);
    let f2 = product(&|i| -d.fy[i] * d.ft[i]);
    let f3 = product(&|i| d.f[i] * d.ft[i]);
    let ft2 = product(&|i| d.ft[i] * d.ft[i]);
    let tensor = (0..w * h).map(|i| [a11[i], a12[i], a13[i], a22[i], a23[i], a33[i]]).collect();
    let load = (0..w * h).map(|i| [f1[i], f2[i], f3[i]]).collect();
    Ok(DataTerms { width: w, height: h, tensor, load, ft2 })
}

/// Smoothing, derivatives and data terms in one pass over a frame pair.
pub fn prepare_data_terms(frame0: &Image, frame1: &Image, sigma: f64, rho: f64) -> Result<DataTerms, ImagingError> {
    let f0 = gaussian_smooth(frame0, sigma)?;
    let f1 = gaussian_smooth(frame1, sigma)?;
    let d = compute_derivatives(&f0, &f1)?;
    build_data_terms(&d, rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.gen::<f64>()).unwrap()
    }

    // Dense convolution: builds the full 2D kernel and sums over all pixels
    // with the reflected source index, independent of the separable path.
    fn dense_smooth(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
        let r = (3.0 * sigma).ceil() as isize;
        let g = |i: isize| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-r..=r).map(g).sum();
        let mirror = |i: isize, n: isize| {
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - 1 - i;
                } else {
                    return i as usize;
                }
            }
        };
        let mut out = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = mirror(x + dx, w as isize);
                        let sy = mirror(y + dy, h as isize);
                        acc += g(dx) * g(dy) / (norm * norm) * data[sy * w + sx];
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn pgm_rescales_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn sixteen_bit_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.pgm");
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        for v in [0u16, 65535, 32768, 1] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data()[1], 1.0);
        assert!((img.data()[2] - 32768.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn color_png_uses_luminance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let buf =
            image::RgbImage::from_fn(
                2,
                2,
                |x, _| {
                    if x == 0 {
                        image::Rgb([255, 0, 0])
                    } else {
                        image::Rgb([0, 0, 255])
                    }
                },
            );
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert!((img.get(0, 0) - 0.299).abs() < 1e-12);
        assert!((img.get(1, 1) - 0.114).abs() < 1e-12);
    }

    #[test]
    fn truncated_file_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x01\x02").unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(matches!(err, ImagingError::Unreadable { .. }), "{err}");
        assert!(err.to_string().contains("unreadable file"));
    }

    #[test]
    fn missing_file_is_unreadable() {
        let err = load_image("/nonexistent/frame.png").unwrap_err();
        assert!(matches!(err, ImagingError::Unreadable { .. }));
    }

    #[test]
    fn non_raster_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.txt");
        std::fs::write(&path, b"plain text, not an image").unwrap();
        assert!(matches!(load_image(&path), Err(ImagingError::Unsupported(_))));
    }

    #[test]
    fn image_invariants() {
        assert!(Image::new(1, 5, vec![0.0; 5]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = random_image(7, 5, 1);
        assert_eq!(gaussian_smooth(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn negative_sigma_rejected() {
        let img = random_image(3, 3, 1);
        assert!(matches!(gaussian_smooth(&img, -0.5), Err(ImagingError::NegativeSigma(_))));
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::constant(9, 6, 0.37).unwrap();
        for sigma in [0.5, 1.0, 2.5, 7.0] {
            let out = gaussian_smooth(&img, sigma).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn impulse_response_matches_discrete_gaussian() {
        // Two identical rows so the vertical pass is the identity.
        let mut data = vec![0.0; 42];
        data[10] = 1.0;
        data[31] = 1.0;
        let img = Image::new(21, 2, data.clone()).unwrap();
        let out = gaussian_smooth(&img, 1.0).unwrap();
        let oracle = dense_smooth(&data, 21, 2, 1.0);
        let center = 1.0 / (-3..=3).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).sum::<f64>();
        assert!((out.get(10, 0) - center).abs() < 1e-15);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn separable_matches_dense_oracle() {
        let img = random_image(11, 8, 3);
        for sigma in [0.7, 1.5, 4.0] {
            let out = gaussian_smooth(&img, sigma).unwrap();
            let oracle = dense_smooth(img.data(), 11, 8, sigma);
            for (a, b) in out.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_frames_have_zero_derivatives() {
        let a = Image::constant(5, 4, 0.5).unwrap();
        let d = compute_derivatives(&a, &a).unwrap();
        for v in d.fx.iter().chain(&d.fy).chain(&d.ft) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn linear_ramp_gradient_is_exact() {
        let w = 10;
        let ramp = Image::from_fn(w, 6, |x, _| x as f64 / w as f64).unwrap();
        let d = compute_derivatives(&ramp, &ramp).unwrap();
        for y in 0..6 {
            for x in 0..w {
                let i = y * w + x;
                assert!((d.fx[i] - 1.0 / w as f64).abs() < 1e-15);
                assert_eq!(d.fy[i], 0.0);
            }
        }
    }

    #[test]
    fn derivatives_match_reference_stencil() {
        let a = random_image(8, 8, 11);
        let b = random_image(8, 8, 12);
        let d = compute_derivatives(&a, &b).unwrap();
        let m = |x: usize, y: usize| (a.get(x, y) + b.get(x, y)) / 2.0;
        for y in 0..8usize {
            for x in 0..8usize {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(7));
                let (yl, yr) = (y.saturating_sub(1), (y + 1).min(7));
                let fx = (m(xr, y) - m(xl, y)) / (xr - xl) as f64;
                let fy = (m(x, yr) - m(x, yl)) / (yr - yl) as f64;
                let i = y * 8 + x;
                assert!((d.fx[i] - fx).abs() < 1e-15);
                assert!((d.fy[i] - fy).abs() < 1e-15);
                assert_eq!(d.ft[i], b.get(x, y) - a.get(x, y));
                assert_eq!(d.f[i], a.get(x, y));
            }
        }
    }

    #[test]
    fn derivative_dimension_mismatch() {
        let a = random_image(4, 4, 0);
        let b = random_image(5, 4, 0);
        assert!(matches!(compute_derivatives(&a, &b), Err(ImagingError::DimensionMismatch(..))));
    }

    #[test]
    fn single_pixel_data_terms() {
        let mk = |v: f64| vec![v; 4];
        let d = DerivativeField { width: 2, height: 2, fx: mk(2.0), fy: mk(0.0), ft: mk(1.0), f: mk(3.0) };
        let t = build_data_terms(&d, 0.0).unwrap();
        let a = t.full_tensor(0);
        assert_eq!(a[0], [4.0, 0.0, -6.0]);
        assert_eq!(*t.load(0), [-2.0, 0.0, 3.0]);
        assert_eq!(t.ft2(0), 1.0);
    }

    #[test]
    fn zero_derivatives_give_zero_terms() {
        let z = vec![0.0; 9];
        let d = DerivativeField { width: 3, height: 3, fx: z.clone(), fy: z.clone(), ft: z.clone(), f: z };
        let t = build_data_terms(&d, 1.5).unwrap();
        assert_eq!(t, DataTerms::zeros(3, 3));
    }

    #[test]
    fn data_terms_match_dense_oracle() {
        let a = random_image(8, 8, 21);
        let b = random_image(8, 8, 22);
        let d = compute_derivatives(&a, &b).unwrap();
        let t = build_data_terms(&d, 1.0).unwrap();
        let prods: [(usize, Box<dyn Fn(usize) -> f64>); 6] = [
            (A11, Box::new(|i| d.fx[i] * d.fx[i])),
            (A12, Box::new(|i| d.fx[i] * d.fy[i])),
            (A13, Box::new(|i| -d.fx[i] * d.f[i])),
            (A22, Box::new(|i| d.fy[i] * d.fy[i])),
            (A23, Box::new(|i| -d.fy[i] * d.f[i])),
            (A33, Box::new(|i| d.f[i] * d.f[i])),
        ];
        for (slot, p) in prods.iter() {
            let raw: Vec<f64> = (0..64).map(p).collect();
            let oracle = dense_smooth(&raw, 8, 8, 1.0);
            for i in 0..64 {
                assert!((t.tensor(i)[*slot] - oracle[i]).abs() < 1e-10);
            }
        }
        let raw: Vec<f64> = (0..64).map(|i| d.f[i] * d.ft[i]).collect();
        let oracle = dense_smooth(&raw, 8, 8, 1.0);
        for i in 0..64 {
            assert!((t.load(i)[2] - oracle[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn unsmoothed_terms_are_pointwise_products() {
        let a = random_image(6, 5, 31);
        let b = random_image(6, 5, 32);
        let d = compute_derivatives(&a, &b).unwrap();
        let t = build_data_terms(&d, 0.0).unwrap();
        for i in 0..30 {
            assert_eq!(t.tensor(i)[A12], d.fx[i] * d.fy[i]);
            assert_eq!(t.tensor(i)[A23], -d.fy[i] * d.f[i]);
            assert_eq!(t.load(i)[0], -d.fx[i] * d.ft[i]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn image_strategy() -> impl Strategy<Value = Image> {
            (2usize..12, 2usize..12).prop_flat_map(|(w, h)| {
                proptest::collection::vec(0.0f64..1.0, w * h).prop_map(move |data| Image::new(w, h, data).unwrap())
            })
        }

        proptest! {
            #[test]
            fn smoothing_preserves_mean(img in image_strategy(), sigma in 0.1f64..6.0) {
                let out = gaussian_smooth(&img, sigma).unwrap();
                let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
                prop_assert!((mean(out.data()) - mean(img.data())).abs() < 1e-10);
            }

            #[test]
            fn smoothing_is_monotone(img in image_strategy(), sigma in 0.1f64..6.0) {
                let out = gaussian_smooth(&img, sigma).unwrap();
                let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in out.data() {
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }

            #[test]
            fn flow_block_is_psd(a in image_strategy(), rho in 0.0f64..3.0) {
                let b = a.scaled_clamped(0.9);
                let d = compute_derivatives(&a, &b).unwrap();
                let t = build_data_terms(&d, rho).unwrap();
                for i in 0..a.data().len() {
                    let e = t.tensor(i);
                    let (p, q, r) = (e[A11], e[A12], e[A22]);
                    prop_assert!(p >= 0.0 && r >= 0.0 && e[A33] >= 0.0);
                    let tr = p + r;
                    let det = p * r - q * q;
                    let disc = ((p - r) * (p - r) + 4.0 * q * q).sqrt();
                    prop_assert!(0.5 * (tr - disc) >= -1e-12 * (1.0 + tr), "det {det}");
                }
            }
        }
    }
}
