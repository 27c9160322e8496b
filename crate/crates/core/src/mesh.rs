//! Structured P1 triangulation: one vertex per pixel, each unit cell split
//! along its `(x, y) -> (x + 1, y + 1)` diagonal.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MeshError {
    #[error("mesh needs at least 2x2 vertices, got {0}x{1}")]
    Degenerate(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub vertices: [usize; 2],
    /// One or two adjacent triangles, lower index first.
    pub triangles: [usize; 2],
    pub boundary: bool,
    pub length: f64,
    /// Unit normal pointing from `triangles[0]` into `triangles[1]`, or
    /// outward for boundary edges.
    pub normal: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct TriMesh {
    width: usize,
    height: usize,
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    areas: Vec<f64>,
    diameters: Vec<f64>,
    edges: Vec<Edge>,
    triangle_edges: Vec<[usize; 3]>,
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn centroid(pts: [[f64; 2]; 3]) -> [f64; 2] {
    [(pts[0][0] + pts[1][0] + pts[2][0]) / 3.0, (pts[0][1] + pts[1][1] + pts[2][1]) / 3.0]
}

/// Builds the pixel mesh of a `width x height` grid. Vertex `(x, y)` has
/// index `y * width + x`; cell `(x, y)` owns triangles `2 c` and `2 c + 1`
/// with `c = y * (width - 1) + x`.
pub fn build_pixel_mesh(width: usize, height: usize) -> Result<TriMesh, MeshError> {
    if width < 2 || height < 2 {
        return Err(MeshError::Degenerate(width, height));
    }
    let vid = |x: usize, y: usize| y * width + x;
    let mut vertices = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            vertices.push([x as f64, y as f64]);
        }
    }
    let n_tri = 2 * (width - 1) * (height - 1);
    let mut triangles = Vec::with_capacity(n_tri);
    for y in 0..height - 1 {
        for x in 0..width - 1 {
            let (v00, v10, v11, v01) = (vid(x, y), vid(x + 1, y), vid(x + 1, y + 1), vid(x, y + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }

    let mut areas = Vec::with_capacity(n_tri);
    let mut diameters = Vec::with_capacity(n_tri);
    for t in &triangles {
        let p = t.map(|v| vertices[v]);
        areas.push(signed_area(p[0], p[1], p[2]));
        diameters.push(dist(p[0], p[1]).max(dist(p[1], p[2])).max(dist(p[2], p[0])));
    }

    // Edge discovery through a per-vertex list of (other vertex, edge id).
    let mut incident: Vec<Vec<(usize, usize)>> = vec![Vec::new(); vertices.len()];
    let mut edges: Vec<Edge> = Vec::new();
    let mut triangle_edges = Vec::with_capacity(n_tri);
    for (t, tri) in triangles.iter().enumerate() {
        let mut local = [0usize; 3];
        for k in 0..3 {
            let (a, b) = (tri[k].min(tri[(k + 1) % 3]), tri[k].max(tri[(k + 1) % 3]));
            let found = incident[a].iter().find(|(o, _)| *o == b).map(|(_, e)| *e);
            let e = match found {
                Some(e) => {
                    edges[e].triangles[1] = t;
                    edges[e].boundary = false;
                    e
                }
                None => {
                    let e = edges.len();
                    incident[a].push((b, e));
                    edges.push(Edge {
                        vertices: [a, b],
                        triangles: [t, t],
                        boundary: true,
                        length: dist(vertices[a], vertices[b]),
                        normal: [0.0, 0.0],
                    });
                    e
                }
            };
            local[k] = e;
        }
        triangle_edges.push(local);
    }

    for e in edges.iter_mut() {
        let (pa, pb) = (vertices[e.vertices[0]], vertices[e.vertices[1]]);
        let tangent = [(pb[0] - pa[0]) / e.length, (pb[1] - pa[1]) / e.length];
        let mut n = [tangent[1], -tangent[0]];
        let from = centroid(triangles[e.triangles[0]].map(|v| vertices[v]));
        let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
        // Orient away from the first triangle.
        if n[0] * (mid[0] - from[0]) + n[1] * (mid[1] - from[1]) < 0.0 {
            n = [-n[0], -n[1]];
        }
        e.normal = n;
    }

    Ok(TriMesh { width, height, vertices, triangles, areas, diameters, edges, triangle_edges })
}

impl TriMesh {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn area(&self, t: usize) -> f64 {
        self.areas[t]
    }

    /// Longest edge of triangle `t`.
    pub fn diameter(&self, t: usize) -> f64 {
        self.diameters[t]
    }

    pub fn triangle_edges(&self, t: usize) -> [usize; 3] {
        self.triangle_edges[t]
    }

    /// Triangle index of the lower (`upper = false`) or upper half of cell `(x, y)`.
    pub fn cell_triangle(&self, x: usize, y: usize, upper: bool) -> usize {
        2 * (y * (self.width - 1) + x) + upper as usize
    }

    /// Gradients of the three barycentric shape functions of triangle `t`.
    pub fn p1_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let p = self.triangles[t].map(|v| self.vertices[v]);
        p1_gradients_of(p)
    }

    /// Lumped mass of each vertex: a third of the adjacent triangle areas.
    pub fn lumped_masses(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                m[v] += self.areas[t] / 3.0;
            }
        }
        m
    }
}

/// P1 shape-function gradients of an arbitrary non-degenerate triangle.
pub fn p1_gradients_of(p: [[f64; 2]; 3]) -> [[f64; 2]; 3] {
    let twice_area = 2.0 * signed_area(p[0], p[1], p[2]);
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        g[i] = [(p[j][1] - p[k][1]) / twice_area, (p[k][0] - p[j][0]) / twice_area];
    }
    g
}
