//! Browser bindings for three demo operations: flow on a synthetic pair,
//! subdomain split ratios, and Schwarz increments against the overlap.

use varflow::adapt::AdaptConfig;
use varflow::assembly::{Model, RegField};
use varflow::imaging::{prepare_data_terms, Image};
use varflow::mesh::build_pixel_mesh;
use varflow::metrics::{colorize, mt_heatmap, GroundTruth};
use varflow::pipeline::{estimate_flow, evaluate_against, FlowParams};
use varflow::schwarz::{build_partition, choose_split, schwarz_solve, split_candidates, SchwarzConfig};
use varflow::synthetic::{shifted_texture, translating_square};
use wasm_bindgen::prelude::*;

fn rgb_to_rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn gray_to_rgba(img: &Image) -> Vec<u8> {
    img.data()
        .iter()
        .flat_map(|&v| {
            let g = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            [g, g, g, 255]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoParams {
    pub size: usize,
    pub dx: f64,
    pub dy: f64,
    pub gain: f64,
    pub alpha: f64,
    pub illumination: bool,
    pub adapt: bool,
    pub parts: usize,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self { size: 64, dx: 1.5, dy: 0.5, gain: 1.2, alpha: 1.0, illumination: true, adapt: true, parts: 4 }
    }
}

#[wasm_bindgen]
pub struct FlowDemo {
    width: usize,
    height: usize,
    frame0: Vec<u8>,
    frame1: Vec<u8>,
    flow: Vec<u8>,
    mt: Vec<u8>,
    aae: f64,
    ee: f64,
    seconds: f64,
    increments: Vec<f64>,
}

#[wasm_bindgen]
impl FlowDemo {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// RGBA bytes of the first frame after the brightness gain.
    pub fn frame0_rgba(&self) -> Vec<u8> {
        self.frame0.clone()
    }

    pub fn frame1_rgba(&self) -> Vec<u8> {
        self.frame1.clone()
    }

    /// Color-coded flow as RGBA bytes.
    pub fn flow_rgba(&self) -> Vec<u8> {
        self.flow.clone()
    }

    /// `m_t` heat map as RGBA; empty for the classical model.
    pub fn mt_rgba(&self) -> Vec<u8> {
        self.mt.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn aae(&self) -> f64 {
        self.aae
    }

    #[wasm_bindgen(getter)]
    pub fn ee(&self) -> f64 {
        self.ee
    }

    #[wasm_bindgen(getter)]
    pub fn seconds(&self) -> f64 {
        self.seconds
    }

    pub fn increments(&self) -> Vec<f64> {
        self.increments.clone()
    }
}

/// Textured square of a third of the frame moving by `(dx, dy)` over a
/// static background, with frame 0 brightened by `gain`.
pub fn run_flow_demo(p: &DemoParams) -> Result<FlowDemo, String> {
    if !(8..=256).contains(&p.size) {
        return Err(format!("size must be within 8..=256, got {}", p.size));
    }
    let pair = translating_square(p.size, p.size, p.size / 3, p.dx, p.dy).map_err(|e| e.to_string())?.with_gain(p.gain);
    let truth = GroundTruth::from_f64(p.size, p.size, &pair.truth).map_err(|e| e.to_string())?;
    let params = FlowParams {
        alpha0: p.alpha,
        lambda0: p.alpha,
        illumination: p.illumination,
        parts: p.parts,
        adapt: p.adapt.then(|| AdaptConfig::for_alpha(p.alpha)),
        ..FlowParams::default()
    };
    let r = estimate_flow(&pair.frame0, &pair.frame1, &params).map_err(|e| e.to_string())?;
    let e = evaluate_against(&r, &truth).map_err(|e| e.to_string())?;
    Ok(FlowDemo {
        width: r.width,
        height: r.height,
        frame0: gray_to_rgba(&pair.frame0),
        frame1: gray_to_rgba(&pair.frame1),
        flow: rgb_to_rgba(&colorize(&r.flow(), None)),
        mt: if p.illumination { rgb_to_rgba(&mt_heatmap(&r.state)) } else { Vec::new() },
        aae: e.aae_deg,
        ee: e.ee_px,
        seconds: r.seconds,
        increments: r.increments.iter().map(|i| i.increment).collect(),
    })
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn flow_demo(
    size: usize,
    dx: f64,
    dy: f64,
    gain: f64,
    alpha: f64,
    illumination: bool,
    adapt: bool,
    parts: usize,
) -> Result<FlowDemo, JsError> {
    run_flow_demo(&DemoParams { size, dx, dy, gain, alpha, illumination, adapt, parts }).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct SplitReport {
    parts_x: Vec<u32>,
    parts_y: Vec<u32>,
    ratios: Vec<f64>,
    chosen: usize,
}

#[wasm_bindgen]
impl SplitReport {
    pub fn parts_x(&self) -> Vec<u32> {
        self.parts_x.clone()
    }

    pub fn parts_y(&self) -> Vec<u32> {
        self.parts_y.clone()
    }

    /// Area over perimeter of one part, per candidate.
    pub fn ratios(&self) -> Vec<f64> {
        self.ratios.clone()
    }

    /// Index of the selected candidate.
    #[wasm_bindgen(getter)]
    pub fn chosen(&self) -> usize {
        self.chosen
    }
}

pub fn run_split_report(width: usize, height: usize, parts: usize) -> Result<SplitReport, String> {
    let best = choose_split(width, height, parts).map_err(|e| e.to_string())?;
    let cands = split_candidates(width, height, parts);
    let chosen = cands.iter().position(|c| c.parts_x == best.parts_x && c.parts_y == best.parts_y).unwrap_or(0);
    Ok(SplitReport {
        parts_x: cands.iter().map(|c| c.parts_x as u32).collect(),
        parts_y: cands.iter().map(|c| c.parts_y as u32).collect(),
        ratios: cands.iter().map(|c| c.ratio).collect(),
        chosen,
    })
}

#[wasm_bindgen]
pub fn split_report(width: usize, height: usize, parts: usize) -> Result<SplitReport, JsError> {
    run_split_report(width, height, parts).map_err(|e| JsError::new(&e))
}

/// Increment per iteration of a 2x2 Schwarz solve on a translated
/// texture, one row of `iterations` values per overlap, concatenated.
pub fn run_overlap_study(size: usize, overlaps: &[usize], iterations: usize) -> Result<Vec<f64>, String> {
    if !(8..=128).contains(&size) || !(1..=100).contains(&iterations) {
        return Err("size must be within 8..=128 and iterations within 1..=100".into());
    }
    let pair = shifted_texture(size, size, 0.6, -0.3).map_err(|e| e.to_string())?;
    let terms = prepare_data_terms(&pair.frame0, &pair.frame1, 1.0, 1.0).map_err(|e| e.to_string())?;
    let mesh = build_pixel_mesh(size, size).map_err(|e| e.to_string())?;
    let reg = RegField::uniform(mesh.triangle_count(), 0.001, 1.0);
    let plan = choose_split(size, size, 4).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(overlaps.len() * iterations);
    for &ov in overlaps {
        let part = build_partition(plan, size, size, ov).map_err(|e| e.to_string())?;
        let cfg = SchwarzConfig { iterations, ..SchwarzConfig::default() };
        let r = schwarz_solve(&mesh, &terms, &part, reg.clone(), Model::Illumination, &cfg, None)
            .map_err(|e| e.to_string())?;
        let mut row: Vec<f64> = r.history.iter().map(|h| h.increment).collect();
        row.resize(iterations, 0.0);
        out.extend(row);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn overlap_study(size: usize, overlaps: Vec<u32>, iterations: usize) -> Result<Vec<f64>, JsError> {
    let ov: Vec<usize> = overlaps.into_iter().map(|o| o as usize).collect();
    run_overlap_study(size, &ov, iterations).map_err(|e| JsError::new(&e))
}
