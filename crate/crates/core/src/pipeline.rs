//! Frame pair in, flow field out: smoothing, data terms, partition and the
//! Schwarz solve with optional regularization adaptation.

use std::error::Error as StdError;
use std::path::Path;
use web_time::Instant;

use thiserror::Error;

use crate::adapt::AdaptConfig;
use crate::assembly::{FlowState, Model, RegField};
use crate::imaging::{load_image, prepare_data_terms, Image};
use crate::linsolve::SolverConfig;
use crate::mesh::build_pixel_mesh;
use crate::metrics::{evaluate, Evaluation, GroundTruth};
use crate::schwarz::{build_partition, choose_split, schwarz_solve, IterationRecord, SchwarzConfig};

/// Failure of one named stage, such as `imaging.load_image`.
#[derive(Debug, Error)]
#[error("{stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: Box<dyn StdError + Send + Sync>,
}

impl PipelineError {
    pub fn new(stage: &'static str, source: impl Into<Box<dyn StdError + Send + Sync>>) -> Self {
        Self { stage, source: source.into() }
    }
}

fn at<E: StdError + Send + Sync + 'static>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::new(stage, e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    pub sigma: f64,
    pub rho: f64,
    pub alpha0: f64,
    pub lambda0: f64,
    pub illumination: bool,
    pub parts: usize,
    pub overlap: usize,
    pub schwarz_iters: usize,
    pub workers: usize,
    pub adapt: Option<AdaptConfig>,
    pub solver: SolverConfig,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            rho: 2.5,
            alpha0: 1000.0,
            lambda0: 1000.0,
            illumination: true,
            parts: 4,
            overlap: 5,
            schwarz_iters: 10,
            workers: 1,
            adapt: Some(AdaptConfig::for_alpha(1000.0)),
            solver: SolverConfig::default(),
        }
    }
}

impl FlowParams {
    pub fn model(&self) -> Model {
        if self.illumination {
            Model::Illumination
        } else {
            Model::Classical
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::new("pipeline.params", msg));
        for (name, v) in [("sigma", self.sigma), ("rho", self.rho)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("alpha", self.alpha0), ("lambda", self.lambda0)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if self.parts == 0 || self.schwarz_iters == 0 || self.workers == 0 {
            return bad("parts, schwarz iterations and workers must be >= 1".into());
        }
        if let Some(a) = &self.adapt {
            a.validate().map_err(at("adapt.config"))?;
        }
        self.solver.validate().map_err(at("linsolve.config"))
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub width: usize,
    pub height: usize,
    pub model: Model,
    pub state: FlowState,
    /// Regularization in force after the last update.
    pub reg: RegField,
    pub increments: Vec<IterationRecord>,
    pub seconds: f64,
}

impl FlowResult {
    pub fn flow(&self) -> Vec<[f64; 2]> {
        (0..self.state.len()).map(|v| self.state.flow(v)).collect()
    }

    /// The illumination rate `m_t`, absent for the classical model.
    pub fn mt(&self) -> Option<Vec<f64>> {
        (self.model == Model::Illumination).then(|| self.state.values().iter().map(|v| v[2]).collect())
    }

    pub fn to_flo(&self) -> GroundTruth {
        GroundTruth::from_f64(self.width, self.height, &self.flow()).expect("flow matches its grid")
    }
}

pub fn load_pair(frame0: &Path, frame1: &Path) -> Result<(Image, Image), PipelineError> {
    let f0 = load_image(frame0).map_err(at("imaging.load_image"))?;
    let f1 = load_image(frame1).map_err(at("imaging.load_image"))?;
    Ok((f0, f1))
}

pub fn estimate_flow(frame0: &Image, frame1: &Image, p: &FlowParams) -> Result<FlowResult, PipelineError> {
    p.validate()?;
    let start = Instant::now();
    let terms = prepare_data_terms(frame0, frame1, p.sigma, p.rho).map_err(at("imaging.prepare_data_terms"))?;
    let (w, h) = (terms.width(), terms.height());
    let mesh = build_pixel_mesh(w, h).map_err(at("mesh.build_pixel_mesh"))?;
    let plan = choose_split(w, h, p.parts).map_err(at("schwarz.choose_split"))?;
    let partition = build_partition(plan, w, h, p.overlap).map_err(at("schwarz.build_partition"))?;
    let reg = RegField::uniform(mesh.triangle_count(), p.alpha0, p.lambda0);
    let cfg =
        SchwarzConfig { iterations: p.schwarz_iters, early_exit: None, workers: p.workers, solver: p.solver.clone() };
    let out = schwarz_solve(&mesh, &terms, &partition, reg, p.model(), &cfg, p.adapt.as_ref())
        .map_err(at("schwarz.schwarz_solve"))?;
    Ok(FlowResult {
        width: w,
        height: h,
        model: p.model(),
        state: out.state,
        reg: out.alpha_history.into_iter().last().expect("initial regularization"),
        increments: out.history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn evaluate_against(result: &FlowResult, truth: &GroundTruth) -> Result<Evaluation, PipelineError> {
    evaluate(&result.flow(), truth).map_err(at("metrics.evaluate"))
}

/// Runs the same frames with and without the illumination field and
/// returns the metric rows `illumination_on` and `illumination_off`.
pub fn illumination_ablation(
    frame0: &Image,
    frame1: &Image,
    truth: &GroundTruth,
    p: &FlowParams,
) -> Result<Vec<(String, Evaluation)>, PipelineError> {
    let mut rows = Vec::with_capacity(2);
    for (label, illumination) in [("illumination_on", true), ("illumination_off", false)] {
        let r = estimate_flow(frame0, frame1, &FlowParams { illumination, ..p.clone() })?;
        rows.push((label.to_string(), evaluate_against(&r, truth)?));
    }
    Ok(rows)
}
