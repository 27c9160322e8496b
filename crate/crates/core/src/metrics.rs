//! Flow evaluation against ground truth, `.flo` files and visualization.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::assembly::{FlowState, RegField};

/// Magic tag of `.flo` files; its little-endian bytes spell `PIEH`.
pub const FLO_TAG: f32 = 202021.25;
/// Components above this magnitude mark unknown flow.
pub const UNKNOWN_FLOW: f32 = 1e9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a .flo file (tag {0:?})")]
    BadMagic([u8; 4]),
    #[error(".flo size mismatch: header implies {expected} bytes, found {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no valid ground-truth pixels")]
    NoValidPixels,
    #[error("image encoding: {0}")]
    Encode(#[from] image::ImageError),
}

/// Flow field stored as in `.flo` files, row-major `(u, v)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<[f32; 2]>,
}

impl GroundTruth {
    pub fn new(width: usize, height: usize, flow: Vec<[f32; 2]>) -> Result<Self, MetricsError> {
        if flow.len() != width * height {
            return Err(MetricsError::DimensionMismatch(format!("{} vectors for {width}x{height}", flow.len())));
        }
        Ok(Self { width, height, flow })
    }

    /// Samples the flow components of a vertex field at the pixels.
    pub fn from_state(width: usize, height: usize, state: &FlowState) -> Result<Self, MetricsError> {
        let flow = (0..state.len()).map(|v| state.flow(v).map(|c| c as f32)).collect();
        Self::new(width, height, flow)
    }

    pub fn from_f64(width: usize, height: usize, flow: &[[f64; 2]]) -> Result<Self, MetricsError> {
        Self::new(width, height, flow.iter().map(|p| p.map(|c| c as f32)).collect())
    }

    pub fn is_valid(&self, i: usize) -> bool {
        let [u, v] = self.flow[i];
        u.is_finite() && v.is_finite() && u.abs() <= UNKNOWN_FLOW && v.abs() <= UNKNOWN_FLOW
    }

    pub fn valid_count(&self) -> usize {
        (0..self.flow.len()).filter(|&i| self.is_valid(i)).count()
    }

    pub fn as_f64(&self) -> Vec<[f64; 2]> {
        self.flow.iter().map(|p| p.map(f64::from)).collect()
    }
}

pub fn encode_flo(gt: &GroundTruth) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * gt.flow.len());
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(gt.width as u32).to_le_bytes());
    out.extend_from_slice(&(gt.height as u32).to_le_bytes());
    for [u, v] in &gt.flow {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<GroundTruth, MetricsError> {
    if bytes.len() < 12 {
        return Err(MetricsError::SizeMismatch { expected: 12, got: bytes.len() });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if word(0) != FLO_TAG.to_le_bytes() {
        return Err(MetricsError::BadMagic(word(0)));
    }
    let width = u32::from_le_bytes(word(4)) as usize;
    let height = u32::from_le_bytes(word(8)) as usize;
    let expected = width.checked_mul(height).and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(12));
    match expected {
        Some(e) if e == bytes.len() => {}
        _ => return Err(MetricsError::SizeMismatch { expected: expected.unwrap_or(usize::MAX), got: bytes.len() }),
    }
    let flow = bytes[12..]
        .chunks_exact(8)
        .map(|c| [f32::from_le_bytes([c[0], c[1], c[2], c[3]]), f32::from_le_bytes([c[4], c[5], c[6], c[7]])])
        .collect();
    Ok(GroundTruth { width, height, flow })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io { path: path.display().to_string(), source }
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<GroundTruth, MetricsError> {
    let path = path.as_ref();
    decode_flo(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn write_flo(path: impl AsRef<Path>, gt: &GroundTruth) -> Result<(), MetricsError> {
    let path = path.as_ref();
    std::fs::write(path, encode_flo(gt)).map_err(io_err(path))
}

fn check_pair(computed: &[[f64; 2]], truth: &GroundTruth) -> Result<(), MetricsError> {
    if computed.len() != truth.flow.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "computed field has {} pixels, ground truth {}",
            computed.len(),
            truth.flow.len()
        )));
    }
    Ok(())
}

fn mean_over_valid(
    computed: &[[f64; 2]],
    truth: &GroundTruth,
    f: impl Fn([f64; 2], [f64; 2]) -> f64,
) -> Result<f64, MetricsError> {
    check_pair(computed, truth)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, c) in computed.iter().enumerate() {
        if truth.is_valid(i) {
            sum += f(*c, truth.flow[i].map(f64::from));
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(sum / n as f64)
}

/// Angle between `(u, v, 1)` vectors in degrees.
pub fn angular_error(h: [f64; 2], e: [f64; 2]) -> f64 {
    let num = h[0] * e[0] + h[1] * e[1] + 1.0;
    let den = ((h[0] * h[0] + h[1] * h[1] + 1.0) * (e[0] * e[0] + e[1] * e[1] + 1.0)).sqrt();
    (num / den).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn endpoint_error(h: [f64; 2], e: [f64; 2]) -> f64 {
    ((h[0] - e[0]).powi(2) + (h[1] - e[1]).powi(2)).sqrt()
}

/// Average angular error in degrees over the valid pixels.
pub fn aae(computed: &[[f64; 2]], truth: &GroundTruth) -> Result<f64, MetricsError> {
    mean_over_valid(computed, truth, angular_error)
}

/// Average endpoint error in pixels over the valid pixels.
pub fn ee(computed: &[[f64; 2]], truth: &GroundTruth) -> Result<f64, MetricsError> {
    mean_over_valid(computed, truth, endpoint_error)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub aae_deg: f64,
    pub ee_px: f64,
    pub valid_pixels: usize,
}

pub fn evaluate(computed: &[[f64; 2]], truth: &GroundTruth) -> Result<Evaluation, MetricsError> {
    Ok(Evaluation { aae_deg: aae(computed, truth)?, ee_px: ee(computed, truth)?, valid_pixels: truth.valid_count() })
}

/// `aae_deg,ee_px,valid_pixels` header and one row per evaluation, each
/// optionally prefixed by a label column named `label_name`.
pub fn write_metrics_csv(
    mut out: impl Write,
    label_name: Option<&str>,
    rows: &[(String, Evaluation)],
) -> std::io::Result<()> {
    match label_name {
        Some(l) => writeln!(out, "{l},aae_deg,ee_px,valid_pixels")?,
        None => writeln!(out, "aae_deg,ee_px,valid_pixels")?,
    }
    for (label, e) in rows {
        if label_name.is_some() {
            write!(out, "{label},")?;
        }
        writeln!(out, "{:.6},{:.6},{}", e.aae_deg, e.ee_px, e.valid_pixels)?;
    }
    Ok(())
}

const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55-entry Middlebury color wheel, starting at red.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    let mut w = Vec::with_capacity(55);
    w.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
    w.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
    w.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
    w.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
    w.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
    w.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
    w
}

/// 99th percentile (nearest rank) of the finite vector magnitudes.
pub fn robust_max_magnitude(flow: &[[f64; 2]]) -> f64 {
    let mut mags: Vec<f64> = flow.iter().map(|p| p[0].hypot(p[1])).filter(|m| m.is_finite()).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((0.99 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

/// Color-wheel rendering as packed RGB bytes. A vector of magnitude
/// `max_magnitude` pointing right maps to the first wheel entry (red);
/// magnitudes beyond the normalization are darkened.
pub fn colorize(flow: &[[f64; 2]], max_magnitude: Option<f64>) -> Vec<u8> {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let norm = max_magnitude.unwrap_or_else(|| robust_max_magnitude(flow));
    let norm = if norm > 0.0 && norm.is_finite() { norm } else { 1.0 };
    let mut out = Vec::with_capacity(flow.len() * 3);
    for &[u, v] in flow {
        if !(u.is_finite() && v.is_finite()) {
            out.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let (u, v) = (u / norm, v / norm);
        let rad = u.hypot(v);
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = ((a + 1.0) / 2.0 * ncols as f64).rem_euclid(ncols as f64);
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f64;
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
            out.push((255.0 * col).floor().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Per-cell `log alpha` as 8-bit gray, brightest where alpha is largest.
/// The grid is the `(width - 1) x (height - 1)` cell array.
pub fn alpha_heatmap(reg: &RegField, width: usize, height: usize) -> Vec<u8> {
    let cells = (width - 1) * (height - 1);
    let logs: Vec<f64> = (0..cells).map(|c| (0.5 * (reg.alpha()[2 * c] + reg.alpha()[2 * c + 1])).ln()).collect();
    let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    logs.iter().map(|&v| if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() as u8 } else { 255 }).collect()
}

/// Signed `m_t` rendering: blue for negative, white at zero, red for positive.
pub fn mt_heatmap(state: &FlowState) -> Vec<u8> {
    let scale = state.values().iter().fold(0.0f64, |m, v| m.max(v[2].abs()));
    let mut out = Vec::with_capacity(state.len() * 3);
    for v in state.values() {
        let t = if scale > 0.0 { v[2] / scale } else { 0.0 };
        let fade = (255.0 * (1.0 - t.abs())).round() as u8;
        out.extend_from_slice(&if t >= 0.0 { [255, fade, fade] } else { [fade, fade, 255] });
    }
    out
}

fn format_for(path: &Path) -> image::ImageFormat {
    image::ImageFormat::from_path(path).unwrap_or(image::ImageFormat::Png)
}

/// Writes packed RGB as PNG or PPM depending on the extension.
pub fn save_rgb(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<(), MetricsError> {
    let path = path.as_ref();
    image::save_buffer_with_format(path, rgb, width as u32, height as u32, image::ColorType::Rgb8, format_for(path))?;
    Ok(())
}

/// Writes 8-bit gray as PGM or PNG depending on the extension.
pub fn save_gray(path: impl AsRef<Path>, width: usize, height: usize, gray: &[u8]) -> Result<(), MetricsError> {
    let path = path.as_ref();
    image::save_buffer_with_format(path, gray, width as u32, height as u32, image::ColorType::L8, format_for(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect()
    }

    #[test]
    fn tag_bytes_spell_pieh() {
        assert_eq!(&FLO_TAG.to_le_bytes(), b"PIEH");
    }

    #[test]
    fn single_vector_file() {
        let mut bytes = b"PIEH".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let gt = decode_flo(&bytes).unwrap();
        assert_eq!((gt.width, gt.height), (1, 1));
        assert_eq!(gt.flow, vec![[1.0, -2.0]]);
    }

    #[test]
    fn bad_files() {
        assert!(matches!(decode_flo(b"PIEX\x01\0\0\0\x01\0\0\0"), Err(MetricsError::BadMagic(_))));
        let mut bytes = encode_flo(&GroundTruth::new(2, 2, vec![[0.0; 2]; 4]).unwrap());
        bytes.pop();
        assert!(matches!(decode_flo(&bytes), Err(MetricsError::SizeMismatch { .. })));
        assert!(matches!(decode_flo(b"PIE"), Err(MetricsError::SizeMismatch { .. })));
        assert!(matches!(read_flo("/nonexistent/x.flo"), Err(MetricsError::Io { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let gt = GroundTruth::from_f64(5, 3, &random_field(15, 4)).unwrap();
        write_flo(&path, &gt).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(encode_flo(&back), encode_flo(&gt));
    }

    #[test]
    fn closed_form_errors() {
        let truth = GroundTruth::new(2, 2, vec![[0.0, 1.0]; 4]).unwrap();
        let comp = vec![[1.0, 0.0]; 4];
        assert!((aae(&comp, &truth).unwrap() - 60.0).abs() < 1e-12);
        let same = truth.as_f64();
        assert_eq!(aae(&same, &truth).unwrap(), 0.0);
        assert_eq!(ee(&same, &truth).unwrap(), 0.0);
        let off: Vec<[f64; 2]> = same.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert!((ee(&off, &truth).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_pixels_are_masked() {
        let truth = GroundTruth::new(3, 1, vec![[0.0, 0.0], [1e10, 0.0], [0.0, f32::NAN]]).unwrap();
        assert_eq!(truth.valid_count(), 1);
        let comp = vec![[0.0, 0.0], [5.0, 5.0], [5.0, 5.0]];
        assert_eq!(ee(&comp, &truth).unwrap(), 0.0);
        let none = GroundTruth::new(1, 1, vec![[2e9, 0.0]]).unwrap();
        assert!(matches!(ee(&[[0.0, 0.0]], &none), Err(MetricsError::NoValidPixels)));
        assert!(matches!(aae(&[[0.0, 0.0]; 2], &none), Err(MetricsError::DimensionMismatch(_))));
    }

    #[test]
    fn match_reference_loops() {
        let a = random_field(64, 1);
        let b = random_field(64, 2);
        let truth = GroundTruth::from_f64(8, 8, &b).unwrap();
        let bt = truth.as_f64();
        let (mut sa, mut se) = (0.0, 0.0);
        for i in 0..64 {
            let (u, v, ue, ve) = (a[i][0], a[i][1], bt[i][0], bt[i][1]);
            let c = (u * ue + v * ve + 1.0) / ((u * u + v * v + 1.0).sqrt() * (ue * ue + ve * ve + 1.0).sqrt());
            sa += c.clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI;
            se += ((u - ue) * (u - ue) + (v - ve) * (v - ve)).sqrt();
        }
        assert!((aae(&a, &truth).unwrap() - sa / 64.0).abs() < 1e-10);
        assert!((ee(&a, &truth).unwrap() - se / 64.0).abs() < 1e-10);
    }

    #[test]
    fn symmetry_and_triangle_inequality() {
        let f32ed = |f: Vec<[f64; 2]>| GroundTruth::from_f64(6, 6, &f).unwrap().as_f64();
        let (x, y, z) = (f32ed(random_field(36, 7)), f32ed(random_field(36, 8)), f32ed(random_field(36, 9)));
        let gt = |f: &[[f64; 2]]| GroundTruth::from_f64(6, 6, f).unwrap();
        assert!((aae(&x, &gt(&y)).unwrap() - aae(&y, &gt(&x)).unwrap()).abs() < 1e-12);
        assert!((ee(&x, &gt(&y)).unwrap() - ee(&y, &gt(&x)).unwrap()).abs() < 1e-12);
        assert!(ee(&x, &gt(&z)).unwrap() <= ee(&x, &gt(&y)).unwrap() + ee(&y, &gt(&z)).unwrap() + 1e-12);
        assert_eq!(aae(&x, &gt(&x)).unwrap(), 0.0);
    }

    #[test]
    fn evaluation_csv() {
        let mut buf = Vec::new();
        let e = Evaluation { aae_deg: 1.5, ee_px: 0.25, valid_pixels: 10 };
        write_metrics_csv(&mut buf, None, &[(String::new(), e)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "aae_deg,ee_px,valid_pixels\n1.500000,0.250000,10\n");
    }

    #[test]
    fn wheel_layout() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [255.0, 0.0, 0.0]);
        assert_eq!(w[15], [255.0, 255.0, 0.0]);
        assert_eq!(w[21], [0.0, 255.0, 0.0]);
        assert_eq!(w[25], [0.0, 255.0, 255.0]);
        assert_eq!(w[36], [0.0, 0.0, 255.0]);
        assert_eq!(w[49], [255.0, 0.0, 255.0]);
    }

    #[test]
    fn colorize_conventions() {
        assert!(colorize(&[[0.0, 0.0]; 9], None).iter().all(|&c| c == 255));
        assert_eq!(colorize(&[[2.0, 0.0]], Some(2.0)), vec![255, 0, 0]);
        // Beyond the normalization the wheel color is darkened.
        assert_eq!(colorize(&[[4.0, 0.0]], Some(2.0)), vec![191, 0, 0]);
    }

    #[test]
    fn rotating_disc_is_continuous() {
        let n = 41;
        let c = (n / 2) as f64;
        let flow: Vec<[f64; 2]> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 - c, (i / n) as f64 - c);
                [x / c, y / c]
            })
            .collect();
        let rgb = colorize(&flow, Some(1.0));
        assert_eq!(rgb.len(), 3 * n * n);
        // Walk a circle: consecutive samples change gradually.
        let r = 15.0;
        let mut prev: Option<[i32; 3]> = None;
        for k in 0..=360 {
            let t = (k as f64).to_radians();
            let (x, y) = ((c + r * t.cos()).round() as usize, (c + r * t.sin()).round() as usize);
            let p = &rgb[3 * (y * n + x)..3 * (y * n + x) + 3];
            let cur = [p[0] as i32, p[1] as i32, p[2] as i32];
            if let Some(q) = prev {
                assert!((0..3).all(|i| (cur[i] - q[i]).abs() <= 40), "jump {q:?} -> {cur:?}");
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn percentile_normalization() {
        let mut f = vec![[1.0, 0.0]; 200];
        f[0] = [1000.0, 0.0];
        assert_eq!(robust_max_magnitude(&f), 1.0);
        assert_eq!(robust_max_magnitude(&[]), 0.0);
    }

    #[test]
    fn heat_maps() {
        let reg = RegField::new(vec![1.0, 1.0, 100.0, 100.0], vec![1.0; 4]).unwrap();
        assert_eq!(alpha_heatmap(&reg, 3, 2), vec![0, 255]);
        let state = FlowState::from_values(vec![[0.0, 0.0, -2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(mt_heatmap(&state), vec![0, 0, 255, 255, 255, 255, 255, 128, 128]);
        let dir = tempfile::tempdir().unwrap();
        save_gray(dir.path().join("a.pgm"), 2, 2, &[0, 255, 255, 0]).unwrap();
        save_rgb(dir.path().join("m.png"), 3, 1, &mt_heatmap(&state)).unwrap();
        let back = crate::imaging::load_image(dir.path().join("a.pgm")).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
