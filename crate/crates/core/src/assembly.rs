//! Discrete weak form of the coupled flow/illumination system.
//!
//! Unknowns are vertex-blocked: vertex `v` carries `(u1, u2, m_t)` (or just
//! `(u1, u2)` for the classical model). The regularizer is piecewise
//! constant per triangle, the data tensor is nodal and integrated with the
//! vertex-lumped rule. Zero-flux conditions on the image border are natural
//! and need no assembly action.

use thiserror::Error;

use crate::imaging::DataTerms;
use crate::linsolve::BlockCsr;
use crate::mesh::TriMesh;

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("regularization must be positive, triangle {triangle} has alpha={alpha}, lambda={lambda}")]
    NonPositiveRegularization { triangle: usize, alpha: f64, lambda: f64 },
    #[error("dirichlet vertex {0} out of range")]
    DirichletOutOfRange(usize),
}

/// Brightness model: classical constancy (2 fields) or the multiplicative
/// illumination model with the extra `m_t` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Model {
    Classical,
    Illumination,
}

impl Model {
    pub fn fields(self) -> usize {
        match self {
            Model::Classical => 2,
            Model::Illumination => 3,
        }
    }
}

/// Per-triangle regularization weights: `alpha` on the flow components,
/// `lambda` on the illumination rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RegField {
    alpha: Vec<f64>,
    lambda: Vec<f64>,
}

impl RegField {
    pub fn uniform(triangles: usize, alpha: f64, lambda: f64) -> Self {
        Self { alpha: vec![alpha; triangles], lambda: vec![lambda; triangles] }
    }

    pub fn new(alpha: Vec<f64>, lambda: Vec<f64>) -> Result<Self, AssemblyError> {
        if alpha.len() != lambda.len() {
            return Err(AssemblyError::DimensionMismatch(format!(
                "alpha has {} entries, lambda {}",
                alpha.len(),
                lambda.len()
            )));
        }
        let reg = Self { alpha, lambda };
        reg.validate()?;
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub(crate) fn alpha_mut(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    /// Coefficient acting on field `c` in triangle `t`.
    #[inline]
    pub fn coefficient(&self, t: usize, c: usize) -> f64 {
        if c < 2 {
            self.alpha[t]
        } else {
            self.lambda[t]
        }
    }

    fn validate(&self) -> Result<(), AssemblyError> {
        for (t, (&a, &l)) in self.alpha.iter().zip(&self.lambda).enumerate() {
            if !(a > 0.0 && l > 0.0 && a.is_finite() && l.is_finite()) {
                return Err(AssemblyError::NonPositiveRegularization { triangle: t, alpha: a, lambda: l });
            }
        }
        Ok(())
    }

    /// Restriction to the vertex rectangle `[x0, x1) x [y0, y1)` of a pixel
    /// mesh whose vertex grid is `width` wide.
    pub fn window(&self, width: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> RegField {
        let cells = (x1 - x0 - 1) * (y1 - y0 - 1);
        let mut alpha = Vec::with_capacity(2 * cells);
        let mut lambda = Vec::with_capacity(2 * cells);
        for y in y0..y1 - 1 {
            let start = 2 * (y * (width - 1) + x0);
            let end = 2 * (y * (width - 1) + x1 - 1);
            alpha.extend_from_slice(&self.alpha[start..end]);
            lambda.extend_from_slice(&self.lambda[start..end]);
        }
        RegField { alpha, lambda }
    }
}

/// Per-vertex `(u1, u2, m_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    values: Vec<[f64; 3]>,
}

impl FlowState {
    pub fn zeros(vertices: usize) -> Self {
        Self { values: vec![[0.0; 3]; vertices] }
    }

    pub fn from_values(values: Vec<[f64; 3]>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, v: usize) -> [f64; 3] {
        self.values[v]
    }

    pub fn flow(&self, v: usize) -> [f64; 2] {
        [self.values[v][0], self.values[v][1]]
    }

    /// Max-norm of the componentwise difference.
    pub fn max_abs_diff(&self, other: &FlowState) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flat_map(|v| v.iter()).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Field-major flattening of the first `fields` components.
    pub fn to_flat(&self, fields: usize) -> Vec<f64> {
        self.values.iter().flat_map(|v| v[..fields].iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64], fields: usize) -> Self {
        let values = flat
            .chunks(fields)
            .map(|c| {
                let mut v = [0.0; 3];
                v[..fields].copy_from_slice(c);
                v
            })
            .collect();
        Self { values }
    }
}

struct Coupling {
    row: usize,
    vertex: usize,
    /// `block x block` row-major entries of `A(row, vertex)`.
    values: Vec<f64>,
}

/// Assembled linear system over the unconstrained vertices.
pub struct SparseSystem {
    model: Model,
    matrix: BlockCsr,
    base_rhs: Vec<f64>,
    rhs: Vec<f64>,
    free_index: Vec<Option<usize>>,
    free_vertices: Vec<usize>,
    coords: Vec<[f64; 2]>,
    dirichlet: Vec<(usize, [f64; 3])>,
    coupling: Vec<Coupling>,
}

impl SparseSystem {
    pub fn model(&self) -> Model {
        self.model
    }

    pub fn matrix(&self) -> &BlockCsr {
        &self.matrix
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.free_index.len()
    }

    /// Block index of vertex `v`, `None` when it is Dirichlet-constrained.
    pub fn free_index(&self, v: usize) -> Option<usize> {
        self.free_index[v]
    }

    pub fn free_vertices(&self) -> &[usize] {
        &self.free_vertices
    }

    /// Pixel position `(x, y)` of each block row.
    pub fn coordinates(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn dirichlet(&self) -> &[(usize, [f64; 3])] {
        &self.dirichlet
    }

    /// Replaces the constrained values (same vertex set) and recomputes the
    /// right-hand side without reassembling the matrix.
    pub fn set_dirichlet_values(&mut self, value: impl Fn(usize) -> [f64; 3]) {
        for d in self.dirichlet.iter_mut() {
            d.1 = value(d.0);
        }
        self.refresh_rhs();
    }

    fn refresh_rhs(&mut self) {
        let b = self.model.fields();
        self.rhs.copy_from_slice(&self.base_rhs);
        let lookup: std::collections::HashMap<usize, [f64; 3]> = self.dirichlet.iter().copied().collect();
        for c in &self.coupling {
            let u = lookup[&c.vertex];
            for i in 0..b {
                let mut acc = 0.0;
                for j in 0..b {
                    acc += c.values[i * b + j] * u[j];
                }
                self.rhs[c.row * b + i] -= acc;
            }
        }
    }

    /// Lifts a solution vector over free unknowns back to all vertices.
    pub fn expand(&self, x: &[f64]) -> FlowState {
        let b = self.model.fields();
        let mut state = FlowState::zeros(self.free_index.len());
        for (k, &v) in self.free_vertices.iter().enumerate() {
            state.values[v][..b].copy_from_slice(&x[k * b..(k + 1) * b]);
        }
        for &(v, u) in &self.dirichlet {
            state.values[v][..b].copy_from_slice(&u[..b]);
        }
        state
    }
}

fn check_dims(mesh: &TriMesh, terms: &DataTerms, reg: &RegField) -> Result<(), AssemblyError> {
    if terms.width() != mesh.width() || terms.height() != mesh.height() {
        return Err(AssemblyError::DimensionMismatch(format!(
            "data terms {}x{} vs mesh {}x{}",
            terms.width(),
            terms.height(),
            mesh.width(),
            mesh.height()
        )));
    }
    if reg.len() != mesh.triangle_count() {
        return Err(AssemblyError::DimensionMismatch(format!(
            "regularization has {} entries for {} triangles",
            reg.len(),
            mesh.triangle_count()
        )));
    }
    Ok(())
}

/// `b x b` leading block of the nodal tensor.
#[inline]
fn tensor_block(terms: &DataTerms, v: usize, b: usize) -> [[f64; 3]; 3] {
    let mut a = terms.full_tensor(v);
    if b == 2 {
        a[0][2] = 0.0;
        a[1][2] = 0.0;
        a[2] = [0.0; 3];
    }
    a
}

/// Assembles stiffness + lumped reaction + lumped load, eliminating the
/// `dirichlet` vertices symmetrically.
pub fn assemble(
    mesh: &TriMesh,
    terms: &DataTerms,
    reg: &RegField,
    model: Model,
    dirichlet: &[(usize, [f64; 3])],
) -> Result<SparseSystem, AssemblyError> {
    check_dims(mesh, terms, reg)?;
    reg.validate()?;
    let nv = mesh.vertex_count();
    let b = model.fields();

    let mut constrained = vec![false; nv];
    let mut dirichlet: Vec<(usize, [f64; 3])> = dirichlet.to_vec();
    dirichlet.sort_by_key(|d| d.0);
    dirichlet.dedup_by_key(|d| d.0);
    for &(v, _) in &dirichlet {
        if v >= nv {
            return Err(AssemblyError::DirichletOutOfRange(v));
        }
        constrained[v] = true;
    }
    let mut free_index = vec![None; nv];
    let mut free_vertices = Vec::with_capacity(nv - dirichlet.len());
    for v in 0..nv {
        if !constrained[v] {
            free_index[v] = Some(free_vertices.len());
            free_vertices.push(v);
        }
    }

    // Sparsity: vertex adjacency through shared triangles.
    let nf = free_vertices.len();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); nv];
    for tri in mesh.triangles() {
        for &a in tri {
            for &c in tri {
                neighbors[a].push(c);
            }
        }
    }
    let mut row_ptr = Vec::with_capacity(nf + 1);
    let mut col_idx = Vec::new();
    row_ptr.push(0);
    let mut coupling_cols: Vec<Vec<usize>> = Vec::with_capacity(nf);
    for &v in &free_vertices {
        let nb = &mut neighbors[v];
        nb.sort_unstable();
        nb.dedup();
        let mut cc = Vec::new();
        for &c in nb.iter() {
            match free_index[c] {
                Some(k) => col_idx.push(k),
                None => cc.push(c),
            }
        }
        coupling_cols.push(cc);
        row_ptr.push(col_idx.len());
    }
    let bb = b * b;
    let mut values = vec![0.0; col_idx.len() * bb];
    let mut coupling: Vec<Coupling> = coupling_cols
        .iter()
        .enumerate()
        .flat_map(|(row, cols)| cols.iter().map(move |&vertex| Coupling { row, vertex, values: vec![0.0; bb] }))
        .collect();
    let mut coupling_start = Vec::with_capacity(nf + 1);
    coupling_start.push(0);
    for cols in &coupling_cols {
        coupling_start.push(coupling_start.last().unwrap() + cols.len());
    }

    let find = |row: usize, col: usize| -> usize {
        let cols = &col_idx[row_ptr[row]..row_ptr[row + 1]];
        row_ptr[row] + cols.binary_search(&col).expect("pattern covers element couplings")
    };

    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = mesh.p1_gradients(t);
        let area = mesh.area(t);
        for (ia, &va) in tri.iter().enumerate() {
            let Some(ra) = free_index[va] else { continue };
            for (ib, &vb) in tri.iter().enumerate() {
                let k_ab = area * (g[ia][0] * g[ib][0] + g[ia][1] * g[ib][1]);
                let block: &mut [f64] = match free_index[vb] {
                    Some(cb) => {
                        let p = find(ra, cb);
                        &mut values[p * bb..(p + 1) * bb]
                    }
                    None => {
                        let range = coupling_start[ra]..coupling_start[ra + 1];
                        let off = coupling_cols[ra].binary_search(&vb).expect("coupling column");
                        &mut coupling[range.start + off].values
                    }
                };
                for c in 0..b {
                    block[c * b + c] += reg.coefficient(t, c) * k_ab;
                }
            }
        }
    }

    let masses = mesh.lumped_masses();
    let mut base_rhs = vec![0.0; nf * b];
    for (k, &v) in free_vertices.iter().enumerate() {
        let a = tensor_block(terms, v, b);
        let p = find(k, k);
        let block = &mut values[p * bb..(p + 1) * bb];
        for i in 0..b {
            for j in 0..b {
                block[i * b + j] += masses[v] * a[i][j];
            }
        }
        let f = terms.load(v);
        for i in 0..b {
            base_rhs[k * b + i] = masses[v] * f[i];
        }
    }

    let matrix = BlockCsr::new(b, row_ptr, col_idx, values);
    let w = mesh.width();
    let coords = free_vertices.iter().map(|&v| [(v % w) as f64, (v / w) as f64]).collect();
    let mut sys = SparseSystem {
        model,
        matrix,
        rhs: base_rhs.clone(),
        base_rhs,
        free_index,
        free_vertices,
        coords,
        dirichlet,
        coupling,
    };
    sys.refresh_rhs();
    Ok(sys)
}

/// Value of half the discrete functional,
/// `1/2 [sum_K |K| Lambda_K |grad U|^2 + sum_v m_v (U^T A U - 2 F.U + K*(f_t^2))]`,
/// so that its gradient over free unknowns equals `A U - b` of [`assemble`].
pub fn energy(
    mesh: &TriMesh,
    terms: &DataTerms,
    reg: &RegField,
    model: Model,
    state: &FlowState,
) -> Result<f64, AssemblyError> {
    check_dims(mesh, terms, reg)?;
    if state.len() != mesh.vertex_count() {
        return Err(AssemblyError::DimensionMismatch(format!(
            "state has {} vertices, mesh {}",
            state.len(),
            mesh.vertex_count()
        )));
    }
    let b = model.fields();
    let mut smooth = 0.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = mesh.p1_gradients(t);
        for c in 0..b {
            let mut grad = [0.0; 2];
            for (i, &v) in tri.iter().enumerate() {
                grad[0] += state.values[v][c] * g[i][0];
                grad[1] += state.values[v][c] * g[i][1];
            }
            smooth += mesh.area(t) * reg.coefficient(t, c) * (grad[0] * grad[0] + grad[1] * grad[1]);
        }
    }
    let masses = mesh.lumped_masses();
    let mut data = 0.0;
    for (v, m) in masses.iter().enumerate() {
        let a = tensor_block(terms, v, b);
        let f = terms.load(v);
        let u = state.values[v];
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..b {
            lin += f[i] * u[i];
            for j in 0..b {
                quad += u[i] * a[i][j] * u[j];
            }
        }
        data += m * (quad - 2.0 * lin + terms.ft2(v));
    }
    Ok(0.5 * (smooth + data))
}
