//! Overlapping rectangular domain decomposition and the synchronous
//! additive Schwarz iteration.

use std::io::Write;
use web_time::Instant;

use thiserror::Error;

use crate::adapt::{error_indicator, update_alpha, AdaptConfig, AdaptError};
use crate::assembly::{assemble, AssemblyError, FlowState, Model, RegField, SparseSystem};
use crate::imaging::DataTerms;
use crate::linsolve::{CholeskyFactor, SolveError, SolverConfig, SolverSession};
use crate::mesh::{build_pixel_mesh, MeshError, TriMesh};

#[derive(Debug, Error)]
pub enum SchwarzError {
    #[error("cannot split {width}x{height} into {parts} parts")]
    BadSplit { width: usize, height: usize, parts: usize },
    #[error("overlap {overlap} invalid for parts of size {min_core}")]
    BadOverlap { overlap: usize, min_core: usize },
    #[error("invalid schwarz config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("subdomain {index}: {source}")]
    Subdomain { index: usize, source: SolveError },
    #[error("subdomain {index}: {source}")]
    SubdomainAssembly { index: usize, source: AssemblyError },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("non-finite increment at iteration {0}")]
    NonFinite(usize),
    #[error("writing increment log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPlan {
    pub parts_x: usize,
    pub parts_y: usize,
    pub ratio: f64,
}

/// Area over perimeter of one part of a `parts_x x parts_y` split.
pub fn split_ratio(width: usize, height: usize, parts_x: usize, parts_y: usize) -> f64 {
    let pw = width as f64 / parts_x as f64;
    let ph = height as f64 / parts_y as f64;
    pw * ph / (2.0 * (pw + ph))
}

/// Every grid arrangement of `n_parts` that fits the image, by ascending `parts_x`.
pub fn split_candidates(width: usize, height: usize, n_parts: usize) -> Vec<SplitPlan> {
    (1..=n_parts)
        .filter(|px| n_parts.is_multiple_of(*px))
        .map(|px| (px, n_parts / px))
        .filter(|&(px, py)| px <= width && py <= height)
        .map(|(px, py)| SplitPlan { parts_x: px, parts_y: py, ratio: split_ratio(width, height, px, py) })
        .collect()
}

/// Arrangement with the largest area/perimeter ratio, ties toward `parts_x >= parts_y`.
pub fn choose_split(width: usize, height: usize, n_parts: usize) -> Result<SplitPlan, SchwarzError> {
    let err = SchwarzError::BadSplit { width, height, parts: n_parts };
    if n_parts == 0 || n_parts > width * height {
        return Err(err);
    }
    let mut best: Option<SplitPlan> = None;
    for c in split_candidates(width, height, n_parts) {
        let better = match best {
            None => true,
            Some(b) => c.ratio > b.ratio || (c.ratio == b.ratio && c.parts_x >= c.parts_y),
        };
        if better {
            best = Some(c);
        }
    }
    best.ok_or(err)
}

/// Half-open vertex rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersect(&self, o: &Rect) -> Option<Rect> {
        let r = Rect { x0: self.x0.max(o.x0), y0: self.y0.max(o.y0), x1: self.x1.min(o.x1), y1: self.y1.min(o.y1) };
        (r.x0 < r.x1 && r.y0 < r.y1).then_some(r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subdomain {
    pub core: Rect,
    pub extended: Rect,
    pub neighbors: Vec<usize>,
    /// `Sigma_ij`: intersection with each neighbour's extended rectangle.
    pub overlaps: Vec<(usize, Rect)>,
    /// `Gamma_ij`: artificial-boundary vertices owned by neighbour `j`'s core.
    pub interfaces: Vec<(usize, Vec<usize>)>,
    /// All artificial-boundary vertices, sorted global indices.
    pub dirichlet: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub width: usize,
    pub height: usize,
    pub overlap: usize,
    pub plan: SplitPlan,
    pub subdomains: Vec<Subdomain>,
}

impl Partition {
    /// Index of the subdomain whose core holds vertex `(x, y)`.
    pub fn owner(&self, x: usize, y: usize) -> usize {
        let px = self.plan.parts_x;
        let bx = (0..px).rposition(|i| i * self.width / px <= x).unwrap();
        let py = self.plan.parts_y;
        let by = (0..py).rposition(|j| j * self.height / py <= y).unwrap();
        by * px + bx
    }
}

pub fn build_partition(
    plan: SplitPlan,
    width: usize,
    height: usize,
    overlap: usize,
) -> Result<Partition, SchwarzError> {
    let (px, py) = (plan.parts_x, plan.parts_y);
    if px == 0 || py == 0 || px > width || py > height {
        return Err(SchwarzError::BadSplit { width, height, parts: px * py });
    }
    let min_core = (width / px).min(height / py);
    if overlap == 0 || (px * py > 1 && overlap > min_core) || min_core < 2 {
        return Err(SchwarzError::BadOverlap { overlap, min_core });
    }
    let mut subs = Vec::with_capacity(px * py);
    for j in 0..py {
        for i in 0..px {
            let core =
                Rect { x0: i * width / px, y0: j * height / py, x1: (i + 1) * width / px, y1: (j + 1) * height / py };
            let extended = Rect {
                x0: core.x0.saturating_sub(overlap),
                y0: core.y0.saturating_sub(overlap),
                x1: (core.x1 + overlap).min(width),
                y1: (core.y1 + overlap).min(height),
            };
            subs.push(Subdomain {
                core,
                extended,
                neighbors: Vec::new(),
                overlaps: Vec::new(),
                interfaces: Vec::new(),
                dirichlet: Vec::new(),
            });
        }
    }
    let mut part = Partition { width, height, overlap, plan, subdomains: subs };
    let exts: Vec<Rect> = part.subdomains.iter().map(|s| s.extended).collect();
    for i in 0..exts.len() {
        let e = exts[i];
        let mut dirichlet = Vec::new();
        for y in e.y0..e.y1 {
            for x in e.x0..e.x1 {
                let on_side = (x == e.x0 && x > 0)
                    || (x + 1 == e.x1 && x + 1 < width)
                    || (y == e.y0 && y > 0)
                    || (y + 1 == e.y1 && y + 1 < height);
                if on_side {
                    dirichlet.push(y * width + x);
                }
            }
        }
        let mut interfaces: Vec<(usize, Vec<usize>)> = Vec::new();
        for &v in &dirichlet {
            let owner = part.owner(v % width, v / width);
            match interfaces.iter_mut().find(|(j, _)| *j == owner) {
                Some((_, list)) => list.push(v),
                None => interfaces.push((owner, vec![v])),
            }
        }
        interfaces.sort_by_key(|(j, _)| *j);
        let mut neighbors = Vec::new();
        let mut overlaps = Vec::new();
        for (j, o) in exts.iter().enumerate() {
            if j != i {
                if let Some(r) = e.intersect(o) {
                    neighbors.push(j);
                    overlaps.push((j, r));
                }
            }
        }
        let s = &mut part.subdomains[i];
        s.dirichlet = dirichlet;
        s.interfaces = interfaces;
        s.neighbors = neighbors;
        s.overlaps = overlaps;
    }
    Ok(part)
}

/// Mapping of workers onto parts: worker `i` joins the group of part
/// `i % n_parts`; with fewer workers than parts, part `p` is queued on
/// worker `p % n_workers`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Workers cooperating on each part.
    pub groups: Vec<Vec<usize>>,
    /// Parts processed by each executing worker, in order.
    pub queues: Vec<Vec<usize>>,
}

pub fn assign_workers(n_workers: usize, n_parts: usize) -> Assignment {
    let n_workers = n_workers.max(1);
    let mut groups = vec![Vec::new(); n_parts];
    if n_workers >= n_parts {
        for w in 0..n_workers {
            groups[w % n_parts].push(w);
        }
        let queues = (0..n_parts).map(|p| vec![p]).collect();
        Assignment { groups, queues }
    } else {
        let mut queues = vec![Vec::new(); n_workers];
        for p in 0..n_parts {
            groups[p].push(p % n_workers);
            queues[p % n_workers].push(p);
        }
        Assignment { groups, queues }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchwarzConfig {
    pub iterations: usize,
    /// Stop early once the increment drops below this value.
    pub early_exit: Option<f64>,
    pub workers: usize,
    pub solver: SolverConfig,
}

impl Default for SchwarzConfig {
    fn default() -> Self {
        Self { iterations: 10, early_exit: None, workers: 1, solver: SolverConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub increment: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SchwarzOutcome {
    pub state: FlowState,
    pub history: Vec<IterationRecord>,
    /// Regularization in force at each iteration, the initial one first.
    pub alpha_history: Vec<RegField>,
}

/// Working state of one subdomain across iterations.
struct Local {
    index: usize,
    ext: Rect,
    core: Rect,
    full_width: usize,
    mesh: TriMesh,
    terms: DataTerms,
    dirichlet: Vec<usize>,
    session: SolverSession,
    system: Option<SparseSystem>,
    factor: Option<CholeskyFactor>,
    reg: Option<RegField>,
    solution: FlowState,
}

impl Local {
    fn new(
        index: usize,
        sub: &Subdomain,
        width: usize,
        terms: &DataTerms,
        solver: SolverConfig,
    ) -> Result<Self, SchwarzError> {
        let ext = sub.extended;
        let mesh = build_pixel_mesh(ext.width(), ext.height())?;
        let dirichlet =
            sub.dirichlet.iter().map(|&g| (g / width - ext.y0) * ext.width() + (g % width - ext.x0)).collect();
        let n = mesh.vertex_count();
        let session = SolverSession::new(solver).map_err(|source| SchwarzError::Subdomain { index, source })?;
        Ok(Self {
            index,
            ext,
            core: sub.core,
            full_width: width,
            mesh,
            terms: terms.window(ext.x0, ext.y0, ext.x1, ext.y1),
            dirichlet,
            session,
            system: None,
            factor: None,
            reg: None,
            solution: FlowState::zeros(n),
        })
    }

    fn global(&self, l: usize) -> usize {
        let w = self.ext.width();
        (self.ext.y0 + l / w) * self.full_width + self.ext.x0 + l % w
    }

    /// Reassembles and refactors only when the local regularization changed.
    fn refresh(&mut self, reg: &RegField, model: Model) -> Result<(), SchwarzError> {
        if self.reg.as_ref() == Some(reg) {
            return Ok(());
        }
        let index = self.index;
        let fixed: Vec<(usize, [f64; 3])> = self.dirichlet.iter().map(|&l| (l, [0.0; 3])).collect();
        let sys = assemble(&self.mesh, &self.terms, reg, model, &fixed)
            .map_err(|source| SchwarzError::SubdomainAssembly { index, source })?;
        self.factor = match self.session.config().method {
            crate::linsolve::Method::DirectCholesky if sys.dim() > 0 => Some(
                self.session
                    .factor_with(sys.matrix(), Some(sys.coordinates()))
                    .map_err(|source| SchwarzError::Subdomain { index, source })?,
            ),
            _ => None,
        };
        self.system = Some(sys);
        self.reg = Some(reg.clone());
        Ok(())
    }

    fn step(&mut self, global: &FlowState) -> Result<(), SchwarzError> {
        let index = self.index;
        let mut sys = self.system.take().expect("system assembled");
        sys.set_dirichlet_values(|l| global.get(self.global(l)));
        let x = match &self.factor {
            Some(f) => f.solve_refined(sys.matrix(), sys.rhs()),
            None => {
                self.session
                    .solve_linear(sys.matrix(), sys.rhs())
                    .map_err(|source| SchwarzError::Subdomain { index, source })?
                    .x
            }
        };
        self.solution = sys.expand(&x);
        self.system = Some(sys);
        Ok(())
    }
}

/// Runs `job` on every subdomain, one thread per worker queue.
fn run_parallel<F>(locals: &mut [Local], queues: &[Vec<usize>], job: F) -> Result<(), SchwarzError>
where
    F: Fn(&mut Local) -> Result<(), SchwarzError> + Sync,
{
    if queues.len() <= 1 {
        return locals.iter_mut().try_for_each(job);
    }
    let mut slots: Vec<Option<&mut Local>> = locals.iter_mut().map(Some).collect();
    let buckets: Vec<Vec<&mut Local>> =
        queues.iter().map(|q| q.iter().map(|&p| slots[p].take().expect("part queued once")).collect()).collect();
    let job = &job;
    let results: Vec<Result<(), SchwarzError>> = std::thread::scope(|scope| {
        let handles: Vec<_> =
            buckets.into_iter().map(|bucket| scope.spawn(move || bucket.into_iter().try_for_each(job))).collect();
        handles.into_iter().map(|h| h.join().expect("subdomain worker panicked")).collect()
    });
    let mut errors: Vec<SchwarzError> = results.into_iter().filter_map(Result::err).collect();
    // Report the lowest subdomain so the message does not depend on timing.
    errors.sort_by_key(|e| match e {
        SchwarzError::Subdomain { index, .. } | SchwarzError::SubdomainAssembly { index, .. } => *index,
        _ => usize::MAX,
    });
    match errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Synchronous additive Schwarz: every subdomain solves with Dirichlet data
/// from the previous composed iterate (zero initially), and the new iterate
/// is composed from the core restrictions. With `adapt`, one regularization
/// update on the composed field follows each of the first `n_adapt`
/// iterations (except the last). Stops early at an exact fixed point.
pub fn schwarz_solve(
    mesh: &TriMesh,
    terms: &DataTerms,
    partition: &Partition,
    reg: RegField,
    model: Model,
    cfg: &SchwarzConfig,
    adapt: Option<&AdaptConfig>,
) -> Result<SchwarzOutcome, SchwarzError> {
    if cfg.iterations == 0 || cfg.workers == 0 {
        return Err(SchwarzError::InvalidConfig("iterations and workers must be >= 1".into()));
    }
    cfg.solver.validate().map_err(|source| SchwarzError::Subdomain { index: 0, source })?;
    if let Some(a) = adapt {
        a.validate()?;
    }
    let (w, h) = (partition.width, partition.height);
    if mesh.width() != w || mesh.height() != h || terms.width() != w || terms.height() != h {
        return Err(SchwarzError::DimensionMismatch(format!(
            "partition {w}x{h}, mesh {}x{}, data {}x{}",
            mesh.width(),
            mesh.height(),
            terms.width(),
            terms.height()
        )));
    }
    if reg.len() != mesh.triangle_count() {
        return Err(SchwarzError::DimensionMismatch(format!(
            "regularization has {} entries for {} triangles",
            reg.len(),
            mesh.triangle_count()
        )));
    }
    let n_parts = partition.subdomains.len();
    let assignment = assign_workers(cfg.workers, n_parts);
    let mut locals = Vec::with_capacity(n_parts);
    for (i, sub) in partition.subdomains.iter().enumerate() {
        let solver = SolverConfig { factor_workers: assignment.groups[i].len().max(1), ..cfg.solver.clone() };
        locals.push(Local::new(i, sub, w, terms, solver)?);
    }

    let mut reg = reg;
    let windowed = |reg: &RegField| -> Vec<RegField> {
        partition
            .subdomains
            .iter()
            .map(|s| reg.window(w, s.extended.x0, s.extended.y0, s.extended.x1, s.extended.y1))
            .collect()
    };
    let mut windows = windowed(&reg);
    let mut alpha_history = vec![reg.clone()];
    let mut global = FlowState::zeros(w * h);
    let mut history = Vec::with_capacity(cfg.iterations);
    for k in 1..=cfg.iterations {
        let start = Instant::now();
        let previous = &global;
        let windows_ref = &windows;
        run_parallel(&mut locals, &assignment.queues, |local| {
            local.refresh(&windows_ref[local.index], model)?;
            local.step(previous)
        })?;
        let mut next = FlowState::zeros(w * h);
        for local in &locals {
            let c = local.core;
            for y in c.y0..c.y1 {
                for x in c.x0..c.x1 {
                    let l = (y - local.ext.y0) * local.ext.width() + (x - local.ext.x0);
                    next.values_mut()[y * w + x] = local.solution.get(l);
                }
            }
        }
        let increment = next.max_abs_diff(&global);
        if !increment.is_finite() {
            return Err(SchwarzError::NonFinite(k));
        }
        global = next;
        let mut changed = false;
        if let Some(a) = adapt {
            if k <= a.n_adapt && k < cfg.iterations {
                let ind = error_indicator(mesh, terms, &reg, model, &global)?;
                let updated = update_alpha(&reg, &ind, a);
                changed = updated != reg;
                reg = updated;
                windows = windowed(&reg);
                alpha_history.push(reg.clone());
            }
        }
        history.push(IterationRecord { iteration: k, increment, seconds: start.elapsed().as_secs_f64() });
        // An unchanged iterate with unchanged coefficients repeats forever.
        if (increment == 0.0 && !changed) || cfg.early_exit.is_some_and(|tol| increment < tol) {
            break;
        }
    }
    Ok(SchwarzOutcome { state: global, history, alpha_history })
}

/// CSV log with header `iteration,increment,seconds`.
pub fn write_increments_csv(mut out: impl Write, history: &[IterationRecord]) -> std::io::Result<()> {
    writeln!(out, "iteration,increment,seconds")?;
    for r in history {
        writeln!(out, "{},{:e},{:.6}", r.iteration, r.increment, r.seconds)?;
    }
    Ok(())
}
