//! A posteriori error indicator and adaptive control of the regularization.

use thiserror::Error;

use crate::assembly::{assemble, AssemblyError, FlowState, Model, RegField};
use crate::imaging::DataTerms;
use crate::linsolve::{SolveError, SolverConfig, SolverSession};
use crate::mesh::TriMesh;

#[derive(Debug, Error, PartialEq)]
pub enum AdaptError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Per-triangle indicator values.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorField {
    eta: Vec<f64>,
    eta_max: f64,
}

impl IndicatorField {
    pub fn from_values(eta: Vec<f64>) -> Self {
        let eta_max = eta.iter().fold(0.0f64, |m, &v| m.max(v));
        Self { eta, eta_max }
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    /// Same values normalized by another maximum (e.g. a global one).
    pub fn with_max(mut self, eta_max: f64) -> Self {
        self.eta_max = eta_max;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub kappa: f64,
    pub eta_threshold: f64,
    pub alpha_th: f64,
    pub n_adapt: usize,
}

impl AdaptConfig {
    /// Defaults for an initial regularization `alpha0`.
    pub fn for_alpha(alpha0: f64) -> Self {
        Self { kappa: 10.0, eta_threshold: 0.1, alpha_th: alpha0 / 100.0, n_adapt: 10 }
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(AdaptError::InvalidConfig(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.alpha_th > 0.0 && self.alpha_th.is_finite()) {
            return Err(AdaptError::InvalidConfig(format!("alpha_th must be positive, got {}", self.alpha_th)));
        }
        if !(0.0..=1.0).contains(&self.eta_threshold) {
            return Err(AdaptError::InvalidConfig(format!(
                "eta threshold must lie in [0, 1], got {}",
                self.eta_threshold
            )));
        }
        Ok(())
    }
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self::for_alpha(1000.0)
    }
}

/// Nodal strong-form residual `F - A U` per component.
fn nodal_residual(terms: &DataTerms, u: &FlowState, fields: usize) -> Vec<[f64; 3]> {
    (0..u.len())
        .map(|v| {
            let a = terms.full_tensor(v);
            let f = terms.load(v);
            let x = u.get(v);
            let mut r = [0.0; 3];
            for c in 0..fields {
                r[c] = f[c] - (0..fields).map(|d| a[c][d] * x[d]).sum::<f64>();
            }
            r
        })
        .collect()
}

/// Element indicator
/// `eta_K = h_K |L^-1/2 r|_{L2(K)} + sum_e w_e h_e |L_e^-1/2 [L grad U . n]|`
/// with `w_e = 1/2` on interior edges and `1` on the image border. Inside an
/// element the divergence term vanishes for P1 fields with constant
/// coefficients, so only the reaction residual and the flux jumps remain.
pub fn error_indicator(
    mesh: &TriMesh,
    terms: &DataTerms,
    reg: &RegField,
    model: Model,
    u: &FlowState,
) -> Result<IndicatorField, AdaptError> {
    if u.len() != mesh.vertex_count() || terms.width() != mesh.width() || terms.height() != mesh.height() {
        return Err(AdaptError::DimensionMismatch(format!(
            "state has {} vertices, mesh {}",
            u.len(),
            mesh.vertex_count()
        )));
    }
    if reg.len() != mesh.triangle_count() {
        return Err(AdaptError::DimensionMismatch(format!(
            "regularization has {} entries for {} triangles",
            reg.len(),
            mesh.triangle_count()
        )));
    }
    let nf = model.fields();
    let r = nodal_residual(terms, u, nf);
    let nt = mesh.triangle_count();
    let mut eta = vec![0.0; nt];
    let mut grads = vec![[[0.0; 2]; 3]; nt];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = mesh.p1_gradients(t);
        let mut sum = 0.0;
        for c in 0..nf {
            let (mut sq, mut lin) = (0.0, 0.0);
            for (k, &v) in tri.iter().enumerate() {
                let val = u.get(v)[c];
                grads[t][c][0] += val * g[k][0];
                grads[t][c][1] += val * g[k][1];
                sq += r[v][c] * r[v][c];
                lin += r[v][c];
            }
            // Exact L2 norm of the P1 interpolant.
            let l2 = mesh.area(t) / 12.0 * (sq + lin * lin);
            sum += l2 / reg.coefficient(t, c);
        }
        eta[t] = mesh.diameter(t) * sum.sqrt();
    }
    for e in mesh.edges() {
        let [t0, t1] = e.triangles;
        let mut sum = 0.0;
        for c in 0..nf {
            let flux = |t: usize| reg.coefficient(t, c) * (grads[t][c][0] * e.normal[0] + grads[t][c][1] * e.normal[1]);
            let (jump, scale) = if e.boundary {
                (flux(t0), reg.coefficient(t0, c))
            } else {
                (flux(t0) - flux(t1), reg.coefficient(t0, c).max(reg.coefficient(t1, c)))
            };
            sum += jump * jump / scale;
        }
        let term = e.length * sum.sqrt();
        if e.boundary {
            eta[t0] += term;
        } else {
            eta[t0] += 0.5 * term;
            eta[t1] += 0.5 * term;
        }
    }
    Ok(IndicatorField::from_values(eta))
}

/// `alpha <- max(alpha / (1 + kappa * max(eta / eta_max - threshold, 0)), alpha_th)`.
/// `lambda` is left untouched; a zero indicator leaves `reg` unchanged.
pub fn update_alpha(reg: &RegField, ind: &IndicatorField, cfg: &AdaptConfig) -> RegField {
    assert_eq!(reg.len(), ind.eta.len(), "indicator and regularization sizes differ");
    let mut out = reg.clone();
    if !(ind.eta_max > 0.0) {
        return out;
    }
    for (a, &e) in out.alpha_mut().iter_mut().zip(&ind.eta) {
        let excess = (e / ind.eta_max - cfg.eta_threshold).max(0.0);
        if excess > 0.0 {
            *a = (*a / (1.0 + cfg.kappa * excess)).max(cfg.alpha_th).min(*a);
        }
    }
    out
}

/// Result of the adaptive loop.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub state: FlowState,
    /// Regularization used by each solve, the initial one first.
    pub history: Vec<RegField>,
    /// Largest indicator value before each update.
    pub eta_max: Vec<f64>,
}

/// Solve, then `n_adapt` rounds of indicator, update and solve.
pub fn adapt_loop(
    mesh: &TriMesh,
    terms: &DataTerms,
    reg0: RegField,
    model: Model,
    solver: &SolverConfig,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome, AdaptError> {
    cfg.validate()?;
    let mut session = SolverSession::new(solver.clone())?;
    let sys = assemble(mesh, terms, &reg0, model, &[])?;
    let mut state = session.solve(&sys)?;
    drop(sys);
    let mut history = vec![reg0];
    let mut eta_max = Vec::with_capacity(cfg.n_adapt);
    for _ in 0..cfg.n_adapt {
        let current = history.last().expect("initial regularization");
        let ind = error_indicator(mesh, terms, current, model, &state)?;
        eta_max.push(ind.eta_max());
        let next = update_alpha(current, &ind, cfg);
        if next != *current {
            let sys = assemble(mesh, terms, &next, model, &[])?;
            state = session.solve(&sys)?;
        }
        history.push(next);
    }
    Ok(AdaptOutcome { state, history, eta_max })
}
