//! Symmetric positive definite sparse solvers.
//!
//! The direct path is a supernodal multifrontal Cholesky factorization
//! `P A P^T = L L^T` over `b x b` vertex blocks. The ordering is
//! postordered along the elimination tree, so every subtree is a contiguous
//! range of supernodes; disjoint subtrees are factorized on separate
//! threads and their ancestors afterwards. Each front is computed by the same
//! arithmetic regardless of scheduling, so results do not depend on the
//! worker count.

use std::collections::BinaryHeap;

use thiserror::Error;

use crate::assembly::{FlowState, SparseSystem};

const NONE: usize = usize::MAX;
const MAX_BLOCK: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("matrix is not positive definite (pivot at unknown {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// Block compressed sparse rows with dense row-major `b x b` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCsr {
    block: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl BlockCsr {
    /// Columns within each row must be sorted and each row must contain its
    /// diagonal block.
    pub fn new(block: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, values: Vec<f64>) -> Self {
        assert!((1..=MAX_BLOCK).contains(&block), "block size {block} unsupported");
        assert_eq!(values.len(), col_idx.len() * block * block);
        assert_eq!(*row_ptr.last().unwrap_or(&0), col_idx.len());
        for r in 0..row_ptr.len().saturating_sub(1) {
            let cols = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            debug_assert!(cols.windows(2).all(|w| w[0] < w[1]));
            assert!(cols.binary_search(&r).is_ok(), "row {r} lacks a diagonal entry");
        }
        Self { block, row_ptr, col_idx, values }
    }

    /// Keeps every block with a nonzero entry plus all diagonal blocks.
    pub fn from_dense(block: usize, dense: &[Vec<f64>]) -> Self {
        let n = dense.len() / block;
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for r in 0..n {
            for c in 0..n {
                let entries: Vec<f64> =
                    (0..block * block).map(|e| dense[r * block + e / block][c * block + e % block]).collect();
                if r == c || entries.iter().any(|v| *v != 0.0) {
                    col_idx.push(c);
                    values.extend(entries);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self::new(block, row_ptr, col_idx, values)
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn block_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.block_rows() * self.block
    }

    pub fn nnz_blocks(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn block_at(&self, p: usize) -> &[f64] {
        let bb = self.block * self.block;
        &self.values[p * bb..(p + 1) * bb]
    }

    fn find(&self, row: usize, col: usize) -> Option<usize> {
        let cols = &self.col_idx[self.row_ptr[row]..self.row_ptr[row + 1]];
        cols.binary_search(&col).ok().map(|o| self.row_ptr[row] + o)
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let b = self.block;
        for r in 0..self.block_rows() {
            let out = &mut y[r * b..(r + 1) * b];
            out.iter_mut().for_each(|v| *v = 0.0);
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[p];
                let blk = self.block_at(p);
                for i in 0..b {
                    let mut acc = 0.0;
                    for j in 0..b {
                        acc += blk[i * b + j] * x[c * b + j];
                    }
                    out[i] += acc;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let b = self.block;
        let n = self.dim();
        let mut d = vec![vec![0.0f64; n]; n];
        for r in 0..self.block_rows() {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[p];
                let blk = self.block_at(p);
                for e in 0..b * b {
                    d[r * b + e / b][c * b + e % b] = blk[e];
                }
            }
        }
        d
    }

    /// Largest `|A_ij - A_ji|` over stored entries; a block missing its
    /// mirror counts with its full magnitude.
    pub fn max_asymmetry(&self) -> f64 {
        let b = self.block;
        let mut worst = 0.0f64;
        for r in 0..self.block_rows() {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[p];
                let blk = self.block_at(p);
                match self.find(c, r) {
                    Some(q) => {
                        let mirror = self.block_at(q);
                        for i in 0..b {
                            for j in 0..b {
                                worst = worst.max((blk[i * b + j] - mirror[j * b + i]).abs());
                            }
                        }
                    }
                    None => worst = worst.max(blk.iter().fold(0.0, |m, v| m.max(v.abs()))),
                }
            }
        }
        worst
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        (0..self.block_rows())
            .map(|r| self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]].iter().copied().filter(|&c| c != r).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    DirectCholesky,
    ConjugateGradient,
}

/// Fill-reducing ordering of the block graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    NestedDissection,
    ReverseCuthillMcKee,
    Natural,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub ordering: Ordering,
    /// Relative residual target of the iterative path.
    pub cg_tolerance: f64,
    /// Defaults to `10 n` when `None`.
    pub cg_max_iters: Option<usize>,
    pub factor_workers: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::DirectCholesky,
            ordering: Ordering::NestedDissection,
            cg_tolerance: 1e-10,
            cg_max_iters: None,
            factor_workers: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.cg_tolerance > 0.0 && self.cg_tolerance < 1.0) {
            return Err(SolveError::InvalidConfig(format!("cg tolerance {} not in (0,1)", self.cg_tolerance)));
        }
        if self.cg_max_iters == Some(0) {
            return Err(SolveError::InvalidConfig("cg max iterations must be >= 1".into()));
        }
        if self.factor_workers == 0 {
            return Err(SolveError::InvalidConfig("factor workers must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Orderings

fn bfs_levels(
    start: usize,
    adj: &[Vec<usize>],
    region: &[u32],
    id: u32,
    seen: &mut [u32],
    stamp: u32,
) -> Vec<Vec<usize>> {
    let mut levels = vec![vec![start]];
    seen[start] = stamp;
    loop {
        let mut next = Vec::new();
        for &v in levels.last().unwrap() {
            for &w in &adj[v] {
                if region[w] == id && seen[w] != stamp {
                    seen[w] = stamp;
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return levels;
        }
        levels.push(next);
    }
}

struct Dissector<'a> {
    adj: &'a [Vec<usize>],
    region: Vec<u32>,
    seen: Vec<u32>,
    next_id: u32,
    stamp: u32,
    order: Vec<usize>,
}

impl Dissector<'_> {
    const LEAF: usize = 48;

    fn fresh(&mut self, nodes: &[usize]) -> u32 {
        self.next_id += 1;
        for &v in nodes {
            self.region[v] = self.next_id;
        }
        self.next_id
    }

    fn levels_from(&mut self, start: usize, id: u32) -> Vec<Vec<usize>> {
        self.stamp += 1;
        bfs_levels(start, self.adj, &self.region, id, &mut self.seen, self.stamp)
    }

    fn pseudo_peripheral(&mut self, start: usize, id: u32) -> Vec<Vec<usize>> {
        let mut levels = self.levels_from(start, id);
        for _ in 0..8 {
            let adj = self.adj;
            let region = &self.region;
            let degree = |v: usize| adj[v].iter().filter(|&&w| region[w] == id).count();
            let cand = *levels.last().unwrap().iter().min_by_key(|&&v| (degree(v), v)).unwrap();
            let trial = self.levels_from(cand, id);
            if trial.len() <= levels.len() {
                break;
            }
            levels = trial;
        }
        levels
    }

    fn dissect(&mut self, nodes: Vec<usize>) {
        if nodes.len() <= Self::LEAF {
            self.order.extend(nodes);
            return;
        }
        let id = self.fresh(&nodes);
        // Split into connected components first.
        let first = self.levels_from(nodes[0], id);
        let reached: usize = first.iter().map(Vec::len).sum();
        if reached < nodes.len() {
            let stamp = self.stamp;
            let rest: Vec<usize> = nodes.iter().copied().filter(|&v| self.seen[v] != stamp).collect();
            let comp: Vec<usize> = first.into_iter().flatten().collect();
            self.dissect(comp);
            self.dissect(rest);
            return;
        }
        let levels = self.pseudo_peripheral(nodes[0], id);
        if levels.len() < 3 {
            self.order.extend(nodes);
            return;
        }
        // Smallest level whose split leaves both sides within 30-70%.
        let n = nodes.len();
        let mut below = 0;
        let mut best: Option<(usize, usize)> = None;
        let mut median = 1;
        for (s, level) in levels.iter().enumerate() {
            let above = n - below - level.len();
            if s > 0 && s + 1 < levels.len() {
                if below * 10 >= n * 3 && above * 10 >= n * 3 && best.is_none_or(|(_, sz)| level.len() < sz) {
                    best = Some((s, level.len()));
                }
                if below < n / 2 {
                    median = s;
                }
            }
            below += level.len();
        }
        let s = best.map_or(median, |(s, _)| s);
        let lower: Vec<usize> = levels[..s].iter().flatten().copied().collect();
        let upper: Vec<usize> = levels[s + 1..].iter().flatten().copied().collect();
        let sep = levels[s].clone();
        self.dissect(lower);
        self.dissect(upper);
        self.order.extend(sep);
    }
}

/// Nested dissection with BFS level-set separators. Returns `perm` with
/// `perm[new] = old`.
pub fn nested_dissection(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut d =
        Dissector { adj, region: vec![0; n], seen: vec![0; n], next_id: 0, stamp: 0, order: Vec::with_capacity(n) };
    d.dissect((0..n).collect());
    d.order
}

/// Nested dissection driven by vertex positions: each region is cut at
/// the median of its wider axis and the cut side's boundary vertices form
/// the separator. Returns `perm` with `perm[new] = old`.
pub fn coordinate_dissection(adj: &[Vec<usize>], coords: &[[f64; 2]]) -> Vec<usize> {
    let n = adj.len();
    assert_eq!(coords.len(), n, "one coordinate per vertex");
    let mut side = vec![0u32; n];
    let mut stamp = 0u32;
    let mut order = Vec::with_capacity(n);
    // Pending work: `Ok(nodes)` to dissect, `Err(sep)` to emit.
    let mut work: Vec<Result<Vec<usize>, Vec<usize>>> = vec![Ok((0..n).collect())];
    while let Some(item) = work.pop() {
        let mut nodes = match item {
            Err(sep) => {
                order.extend(sep);
                continue;
            }
            Ok(nodes) => nodes,
        };
        if nodes.len() <= Dissector::LEAF {
            order.extend(nodes);
            continue;
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for &v in &nodes {
            for d in 0..2 {
                lo[d] = lo[d].min(coords[v][d]);
                hi[d] = hi[d].max(coords[v][d]);
            }
        }
        let axis = usize::from(hi[1] - lo[1] > hi[0] - lo[0]);
        nodes.sort_by(|&a, &b| coords[a][axis].total_cmp(&coords[b][axis]).then(a.cmp(&b)));
        let cut = coords[nodes[nodes.len() / 2]][axis];
        let split = nodes.partition_point(|&v| coords[v][axis] < cut);
        if split == 0 {
            order.extend(nodes);
            continue;
        }
        stamp += 1;
        for &v in &nodes[..split] {
            side[v] = stamp;
        }
        let (left, right) = nodes.split_at(split);
        let (sep, rest): (Vec<usize>, Vec<usize>) =
            right.iter().partition(|&&v| adj[v].iter().any(|&w| side[w] == stamp));
        work.push(Err(sep));
        work.push(Ok(rest));
        work.push(Ok(left.to_vec()));
    }
    order
}

/// Reverse Cuthill-McKee, one BFS per connected component from a
/// pseudo-peripheral vertex.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let region = vec![0u32; n];
    let mut seen = vec![0u32; n];
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut stamp = 0;
    for s in 0..n {
        if placed[s] {
            continue;
        }
        // Peripheral search inside the component of s.
        stamp += 1;
        let mut levels = bfs_levels(s, adj, &region, 0, &mut seen, stamp);
        let mut root = s;
        for _ in 0..8 {
            let cand = *levels.last().unwrap().iter().min_by_key(|&&v| (adj[v].len(), v)).unwrap();
            stamp += 1;
            let trial = bfs_levels(cand, adj, &region, 0, &mut seen, stamp);
            if trial.len() <= levels.len() {
                break;
            }
            levels = trial;
            root = cand;
        }
        let start = order.len();
        order.push(root);
        placed[root] = true;
        let mut head = start;
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&w| !placed[w]).collect();
            nb.sort_by_key(|&w| (adj[w].len(), w));
            for w in nb {
                placed[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

// ---------------------------------------------------------------------------
// Symbolic analysis

/// Ordering, elimination tree, supernodes and the parallel task split of a
/// block matrix pattern. Reusable across matrices with that pattern.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    block: usize,
    perm: Vec<usize>,
    /// Column `j` of the permuted lower triangle: `(k > j, source block of A(perm k, perm j))`.
    lower_ptr: Vec<usize>,
    lower: Vec<(usize, usize)>,
    diag_src: Vec<usize>,
    nnz: usize,
    /// Inclusive column ranges of the supernodes, in postorder.
    snodes: Vec<(usize, usize)>,
    sn_parent: Vec<usize>,
    sn_children: Vec<Vec<usize>>,
    /// Block rows of each supernode below its last column, ascending.
    rows_ptr: Vec<usize>,
    rows: Vec<usize>,
    /// Offsets of the dense column-major panels.
    panel_ptr: Vec<usize>,
    /// Disjoint supernode subtrees as inclusive ranges, sorted.
    tasks: Vec<(usize, usize)>,
}

fn permuted_pattern(a: &BlockCsr, perm: &[usize]) -> (Vec<usize>, Vec<(usize, usize)>, Vec<usize>) {
    let n = perm.len();
    let mut iperm = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        iperm[old] = new;
    }
    // Upper pattern by rows, which is the lower pattern by columns.
    let mut counts = vec![0usize; n + 1];
    let mut diag = vec![NONE; n];
    for (k, &old) in perm.iter().enumerate() {
        for p in a.row_ptr[old]..a.row_ptr[old + 1] {
            let j = iperm[a.col_idx[p]];
            if j < k {
                counts[j + 1] += 1;
            } else if j == k {
                diag[k] = p;
            }
        }
    }
    for j in 0..n {
        counts[j + 1] += counts[j];
    }
    let mut fill = counts.clone();
    let mut lower = vec![(0, 0); counts[n]];
    for (k, &old) in perm.iter().enumerate() {
        for p in a.row_ptr[old]..a.row_ptr[old + 1] {
            let j = iperm[a.col_idx[p]];
            if j < k {
                lower[fill[j]] = (k, p);
                fill[j] += 1;
            }
        }
    }
    (counts, lower, diag)
}

/// Elimination tree from the lower pattern by columns.
fn etree(n: usize, lower_ptr: &[usize], lower: &[(usize, usize)]) -> Vec<usize> {
    // Row k of the upper triangle is gathered from the column lists.
    let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for &(k, _) in &lower[lower_ptr[j]..lower_ptr[j + 1]] {
            by_row[k].push(j);
        }
    }
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for (k, row) in by_row.iter().enumerate() {
        for &j in row {
            let mut i = j;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

fn postorder(parent: &[usize]) -> Vec<usize> {
    let n = parent.len();
    let mut head = vec![NONE; n];
    let mut next = vec![NONE; n];
    // Children linked so they are visited in ascending order.
    for j in (0..n).rev() {
        if parent[j] != NONE {
            next[j] = head[parent[j]];
            head[parent[j]] = j;
        }
    }
    let mut post = Vec::with_capacity(n);
    let mut stack = Vec::new();
    for root in 0..n {
        if parent[root] != NONE {
            continue;
        }
        stack.push(root);
        while let Some(&top) = stack.last() {
            let child = head[top];
            if child == NONE {
                stack.pop();
                post.push(top);
            } else {
                head[top] = next[child];
                stack.push(child);
            }
        }
    }
    post
}

/// Off-diagonal nonzero count of every column of `L`, by row subtrees.
fn column_counts(n: usize, parent: &[usize], lower_ptr: &[usize], lower: &[(usize, usize)]) -> Vec<usize> {
    let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for &(k, _) in &lower[lower_ptr[j]..lower_ptr[j + 1]] {
            by_row[k].push(j);
        }
    }
    let mut counts = vec![0usize; n];
    let mut mark = vec![NONE; n];
    for (k, row) in by_row.iter().enumerate() {
        mark[k] = k;
        for &j in row {
            let mut i = j;
            while mark[i] != k {
                mark[i] = k;
                counts[i] += 1;
                i = parent[i];
            }
        }
    }
    counts
}

impl Symbolic {
    pub fn analyze(a: &BlockCsr, ordering: Ordering, workers: usize) -> Self {
        Self::analyze_with(a, ordering, workers, None)
    }

    /// Like [`Symbolic::analyze`]; nested dissection cuts geometrically
    /// when `coords` gives a position for every block row.
    pub fn analyze_with(a: &BlockCsr, ordering: Ordering, workers: usize, coords: Option<&[[f64; 2]]>) -> Self {
        let n = a.block_rows();
        let b = a.block;
        let adj = a.adjacency();
        let perm0 = match ordering {
            Ordering::NestedDissection => match coords {
                Some(c) if c.len() == n => coordinate_dissection(&adj, c),
                _ => nested_dissection(&adj),
            },
            Ordering::ReverseCuthillMcKee => reverse_cuthill_mckee(&adj),
            Ordering::Natural => (0..n).collect(),
        };
        let (ptr0, lower0, _) = permuted_pattern(a, &perm0);
        let post = postorder(&etree(n, &ptr0, &lower0));
        let perm: Vec<usize> = post.iter().map(|&q| perm0[q]).collect();
        let (lower_ptr, lower, diag_src) = permuted_pattern(a, &perm);
        let parent = etree(n, &lower_ptr, &lower);
        let counts = column_counts(n, &parent, &lower_ptr, &lower);
        let nnz = counts.iter().sum();

        // Fundamental supernodes: chains where each column is the only child
        // of the next and the pattern shrinks by exactly one.
        let mut n_children = vec![0usize; n];
        for &p in &parent {
            if p != NONE {
                n_children[p] += 1;
            }
        }
        let mut snodes = Vec::new();
        let mut start = 0;
        for j in 0..n {
            let last = j + 1 == n
                || parent[j] != j + 1
                || n_children[j + 1] != 1
                || counts[j] != counts[j + 1] + 1
                || j + 1 - start >= 256;
            if last {
                snodes.push((start, j));
                start = j + 1;
            }
        }
        let ns = snodes.len();
        let mut col_sn = vec![0usize; n];
        for (s, &(f, l)) in snodes.iter().enumerate() {
            col_sn[f..=l].iter_mut().for_each(|c| *c = s);
        }
        let sn_parent: Vec<usize> =
            snodes.iter().map(|&(_, l)| if parent[l] == NONE { NONE } else { col_sn[parent[l]] }).collect();
        let mut sn_children = vec![Vec::new(); ns];
        for s in 0..ns {
            if sn_parent[s] != NONE {
                sn_children[sn_parent[s]].push(s);
            }
        }

        let mut rows_ptr = vec![0usize];
        let mut rows: Vec<usize> = Vec::with_capacity(nnz / 4);
        let mut panel_ptr = vec![0usize];
        let mut mark = vec![NONE; n];
        for s in 0..ns {
            let (f, l) = snodes[s];
            let begin = rows.len();
            for c in f..=l {
                for &(k, _) in &lower[lower_ptr[c]..lower_ptr[c + 1]] {
                    if k > l && mark[k] != s {
                        mark[k] = s;
                        rows.push(k);
                    }
                }
            }
            for &ch in &sn_children[s] {
                for i in rows_ptr[ch]..rows_ptr[ch + 1] {
                    let r = rows[i];
                    if r > l && mark[r] != s {
                        mark[r] = s;
                        rows.push(r);
                    }
                }
            }
            rows[begin..].sort_unstable();
            debug_assert_eq!(rows.len() - begin, counts[l]);
            rows_ptr.push(rows.len());
            let ncb = l + 1 - f;
            let m = (ncb + rows.len() - begin) * b;
            panel_ptr.push(panel_ptr[s] + m * ncb * b);
        }

        let tasks = split_subtrees(&sn_parent, &sn_children, workers);
        Self {
            n,
            block: b,
            perm,
            lower_ptr,
            lower,
            diag_src,
            nnz,
            snodes,
            sn_parent,
            sn_children,
            rows_ptr,
            rows,
            panel_ptr,
            tasks,
        }
    }

    /// Permutation with `perm[new] = old` (block indices).
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Off-diagonal blocks of `L`.
    pub fn nnz_blocks(&self) -> usize {
        self.nnz
    }

    /// Floating point operations of the numeric factorization.
    pub fn factor_flops(&self) -> f64 {
        (0..self.snodes.len())
            .map(|s| {
                let (nc, m) = self.panel_shape(s);
                (0..nc).map(|j| ((m - j) * (m - j)) as f64).sum::<f64>()
            })
            .sum()
    }

    pub fn supernode_count(&self) -> usize {
        self.snodes.len()
    }

    /// Supernode ranges factorized concurrently.
    pub fn task_ranges(&self) -> &[(usize, usize)] {
        &self.tasks
    }

    fn compatible(&self, a: &BlockCsr) -> bool {
        a.block == self.block && a.block_rows() == self.n
    }

    fn snode_rows(&self, s: usize) -> &[usize] {
        &self.rows[self.rows_ptr[s]..self.rows_ptr[s + 1]]
    }

    /// `(columns, rows)` of the dense panel of supernode `s`, in scalars.
    fn panel_shape(&self, s: usize) -> (usize, usize) {
        let (f, l) = self.snodes[s];
        let nc = (l + 1 - f) * self.block;
        (nc, nc + self.snode_rows(s).len() * self.block)
    }
}

/// Picks disjoint subtrees (contiguous in postorder) to factorize in
/// parallel by splitting the largest subtree until there are enough.
fn split_subtrees(parent: &[usize], children: &[Vec<usize>], workers: usize) -> Vec<(usize, usize)> {
    let n = parent.len();
    if workers <= 1 || n < 32 {
        return Vec::new();
    }
    let mut size = vec![1usize; n];
    for j in 0..n {
        if parent[j] != NONE {
            size[parent[j]] += size[j];
        }
    }
    let mut heap: BinaryHeap<(usize, usize)> = (0..n).filter(|&j| parent[j] == NONE).map(|j| (size[j], j)).collect();
    let target = 4 * workers;
    let min_size = (n / (16 * workers)).max(8);
    let mut done = Vec::new();
    while heap.len() + done.len() < target {
        let Some((s, j)) = heap.pop() else { break };
        if s < 2 * min_size || children[j].is_empty() {
            done.push((s, j));
            break;
        }
        for &c in &children[j] {
            heap.push((size[c], c));
        }
    }
    let mut tasks: Vec<(usize, usize)> =
        heap.into_iter().chain(done).filter(|&(s, _)| s >= 2).map(|(s, j)| (j + 1 - s, j)).collect();
    tasks.sort_unstable();
    tasks
}

// ---------------------------------------------------------------------------
// Numeric factorization

/// Numeric supernodal Cholesky factor.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    sym: Symbolic,
    panels: Vec<f64>,
}

const PANEL: usize = 16;

#[inline]
fn axpy_neg(t: &mut [f64], c: f64, x: &[f64]) {
    for (ti, xi) in t.iter_mut().zip(x) {
        *ti -= c * xi;
    }
}

/// Factors the leading `nc` columns of the `m x m` column-major lower
/// matrix `a` and applies the Schur update to the trailing block. Returns
/// the failing local column on a nonpositive pivot.
/// `A[c.., c..] -= L[c.., j0..j1] L[c.., j0..j1]^T` on the lower triangle
/// of the trailing block `c >= j1`, in column strips.
fn trailing_update(a: &mut [f64], m: usize, j0: usize, j1: usize) {
    const STRIP: usize = 64;
    assert!(a.len() >= m * m && j1 <= m);
    let kw = j1 - j0;
    let p = a.as_mut_ptr();
    let ms = m as isize;
    let mut c0 = j1;
    while c0 < m {
        let c1 = (c0 + STRIP).min(m);
        // SAFETY: all offsets lie inside the m x m buffer, and the source
        // columns j0..j1 are disjoint from the destination columns c0..c1.
        unsafe {
            let l = p.add(c0 + j0 * m);
            matrixmultiply::dgemm(m - c0, kw, c1 - c0, -1.0, l, 1, ms, l, ms, 1, 1.0, p.add(c0 + c0 * m), 1, ms);
        }
        c0 = c1;
    }
}

fn partial_cholesky(a: &mut [f64], m: usize, nc: usize) -> Result<(), usize> {
    let mut j0 = 0;
    while j0 < nc {
        let j1 = (j0 + PANEL).min(nc);
        for j in j0..j1 {
            let (left, right) = a.split_at_mut(j * m);
            let col = &mut right[j..m];
            for k in j0..j {
                let c = left[j + k * m];
                if c != 0.0 {
                    axpy_neg(col, c, &left[j + k * m..(k + 1) * m]);
                }
            }
            let d = col[0];
            if !(d > 0.0 && d.is_finite()) {
                return Err(j);
            }
            let s = d.sqrt();
            col[0] = s;
            let inv = 1.0 / s;
            col[1..].iter_mut().for_each(|v| *v *= inv);
        }
        trailing_update(a, m, j0, j1);
        j0 = j1;
    }
    Ok(())
}

struct FrontWork {
    relmap: Vec<usize>,
    front: Vec<f64>,
}

impl FrontWork {
    fn new(n: usize) -> Self {
        Self { relmap: vec![0; n], front: Vec::new() }
    }

    /// Assembles, factors and stores supernode `s`; returns its update matrix.
    fn factor(
        &mut self,
        sym: &Symbolic,
        a: &BlockCsr,
        s: usize,
        child_updates: Vec<Vec<f64>>,
        panel: &mut [f64],
    ) -> Result<Vec<f64>, usize> {
        let b = sym.block;
        let (f, l) = sym.snodes[s];
        let ncb = l + 1 - f;
        let rows = sym.snode_rows(s);
        let (nc, m) = sym.panel_shape(s);
        for c in f..=l {
            self.relmap[c] = c - f;
        }
        for (i, &r) in rows.iter().enumerate() {
            self.relmap[r] = ncb + i;
        }
        let front = &mut self.front;
        front.clear();
        front.resize(m * m, 0.0);
        let put = |front: &mut [f64], lr: usize, lc: usize, blk: &[f64]| {
            for rr in 0..b {
                for cc in 0..b {
                    front[(lr * b + rr) + (lc * b + cc) * m] += blk[rr * b + cc];
                }
            }
        };
        for c in f..=l {
            let lc = c - f;
            put(front, lc, lc, a.block_at(sym.diag_src[c]));
            for &(k, p) in &sym.lower[sym.lower_ptr[c]..sym.lower_ptr[c + 1]] {
                put(front, self.relmap[k], lc, a.block_at(p));
            }
        }
        for (&ch, upd) in sym.sn_children[s].iter().zip(&child_updates) {
            let crow = sym.snode_rows(ch);
            let cm = crow.len() * b;
            for (jj, &rj) in crow.iter().enumerate() {
                let tj = self.relmap[rj];
                for cc in 0..b {
                    let src_col = (jj * b + cc) * cm;
                    let dst_col = (tj * b + cc) * m;
                    for (ii, &ri) in crow.iter().enumerate().skip(jj) {
                        let ti = self.relmap[ri];
                        let r0 = if ii == jj { cc } else { 0 };
                        for rr in r0..b {
                            front[dst_col + ti * b + rr] += upd[src_col + ii * b + rr];
                        }
                    }
                }
            }
        }
        drop(child_updates);
        partial_cholesky(front, m, nc)?;
        panel.copy_from_slice(&front[..m * nc]);
        let nr = m - nc;
        let mut update = vec![0.0; nr * nr];
        for j in 0..nr {
            let src = (nc + j) * m + nc;
            update[j * nr + j..(j + 1) * nr].copy_from_slice(&front[src + j..src + nr]);
        }
        Ok(update)
    }
}

impl CholeskyFactor {
    pub fn new(a: &BlockCsr, ordering: Ordering, workers: usize) -> Result<Self, SolveError> {
        let sym = Symbolic::analyze(a, ordering, workers);
        Self::with_symbolic(sym, a, workers)
    }

    /// Numeric factorization on a precomputed pattern analysis.
    pub fn with_symbolic(sym: Symbolic, a: &BlockCsr, workers: usize) -> Result<Self, SolveError> {
        if !sym.compatible(a) {
            return Err(SolveError::DimensionMismatch { expected: sym.n * sym.block, got: a.dim() });
        }
        let ns = sym.snodes.len();
        let b = sym.block;
        let mut panels = vec![0.0; sym.panel_ptr[ns]];
        let mut updates: Vec<Option<Vec<f64>>> = vec![None; ns];
        let pivot_error = |s: usize, c: usize| {
            let col = sym.snodes[s].0 + c / b;
            SolveError::NotPositiveDefinite { pivot: sym.perm[col] * b + c % b }
        };
        let take_children = |updates: &mut [Option<Vec<f64>>], s: usize, offset: usize| -> Vec<Vec<f64>> {
            sym.sn_children[s].iter().map(|&c| updates[c - offset].take().expect("child factored")).collect()
        };

        let tasks: &[(usize, usize)] = if workers > 1 { &sym.tasks } else { &[] };
        let mut in_task = vec![false; ns];
        if !tasks.is_empty() {
            let mut views: Vec<(usize, usize, &mut [f64])> = Vec::with_capacity(tasks.len());
            let mut rest: &mut [f64] = &mut panels;
            let mut offset = 0;
            for &(lo, hi) in tasks {
                let (_, tail) = std::mem::take(&mut rest).split_at_mut(sym.panel_ptr[lo] - offset);
                let (mine, tail) = tail.split_at_mut(sym.panel_ptr[hi + 1] - sym.panel_ptr[lo]);
                rest = tail;
                offset = sym.panel_ptr[hi + 1];
                views.push((lo, hi, mine));
                in_task[lo..=hi].iter_mut().for_each(|f| *f = true);
            }
            let mut groups: Vec<Vec<(usize, usize, &mut [f64])>> = (0..workers).map(|_| Vec::new()).collect();
            for (i, v) in views.into_iter().enumerate() {
                groups[i % workers].push(v);
            }
            let sym_ref = &sym;
            let results: Vec<Vec<Result<(usize, Vec<f64>), (usize, usize)>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = groups
                    .into_iter()
                    .filter(|g| !g.is_empty())
                    .map(|group| {
                        scope.spawn(move || {
                            let mut work = FrontWork::new(sym_ref.n);
                            let mut out = Vec::new();
                            for (lo, hi, panel) in group {
                                out.push(factor_range(sym_ref, a, lo, hi, panel, &mut work));
                            }
                            out
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("factor worker panicked")).collect()
            });
            let mut failures = Vec::new();
            for r in results.into_iter().flatten() {
                match r {
                    Ok((root, upd)) => updates[root] = Some(upd),
                    Err(e) => failures.push(e),
                }
            }
            // Lowest failing pivot for a schedule-independent error.
            if let Some((s, c)) = failures.into_iter().min() {
                return Err(pivot_error(s, c));
            }
        }

        let mut work = FrontWork::new(sym.n);
        for s in (0..ns).filter(|&s| !in_task[s]) {
            let children = take_children(&mut updates, s, 0);
            let panel = &mut panels[sym.panel_ptr[s]..sym.panel_ptr[s + 1]];
            let upd = work.factor(&sym, a, s, children, panel).map_err(|c| pivot_error(s, c))?;
            if sym.sn_parent[s] != NONE {
                updates[s] = Some(upd);
            }
        }
        Ok(Self { sym, panels })
    }

    pub fn symbolic(&self) -> &Symbolic {
        &self.sym
    }

    /// Solves `A x = rhs` with the factor.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let sym = &self.sym;
        let (n, b) = (sym.n, sym.block);
        let mut y = vec![0.0; n * b];
        for (k, &old) in sym.perm.iter().enumerate() {
            y[k * b..(k + 1) * b].copy_from_slice(&rhs[old * b..(old + 1) * b]);
        }
        let mut gather: Vec<usize> = Vec::new();
        let mut off: Vec<f64> = Vec::new();
        let scatter_rows = |s: usize, gather: &mut Vec<usize>| {
            gather.clear();
            for &r in sym.snode_rows(s) {
                gather.extend(r * b..(r + 1) * b);
            }
        };
        for s in 0..sym.snodes.len() {
            let (nc, m) = sym.panel_shape(s);
            let p = &self.panels[sym.panel_ptr[s]..sym.panel_ptr[s + 1]];
            let c0 = sym.snodes[s].0 * b;
            scatter_rows(s, &mut gather);
            off.clear();
            off.resize(m - nc, 0.0);
            let top = &mut y[c0..c0 + nc];
            for j in 0..nc {
                let col = &p[j * m..(j + 1) * m];
                let xj = top[j] / col[j];
                top[j] = xj;
                axpy_neg(&mut top[j + 1..], xj, &col[j + 1..nc]);
                axpy_neg(&mut off, xj, &col[nc..]);
            }
            for (&g, &v) in gather.iter().zip(&off) {
                y[g] += v;
            }
        }
        for s in (0..sym.snodes.len()).rev() {
            let (nc, m) = sym.panel_shape(s);
            let p = &self.panels[sym.panel_ptr[s]..sym.panel_ptr[s + 1]];
            let c0 = sym.snodes[s].0 * b;
            scatter_rows(s, &mut gather);
            off.clear();
            off.extend(gather.iter().map(|&g| y[g]));
            let top = &mut y[c0..c0 + nc];
            for j in (0..nc).rev() {
                let col = &p[j * m..(j + 1) * m];
                let acc = top[j] - dot(&col[j + 1..nc], &top[j + 1..]) - dot(&col[nc..], &off);
                top[j] = acc / col[j];
            }
        }
        let mut x = vec![0.0; n * b];
        for (k, &old) in sym.perm.iter().enumerate() {
            x[old * b..(old + 1) * b].copy_from_slice(&y[k * b..(k + 1) * b]);
        }
        x
    }

    /// Solve followed by one step of iterative refinement against `a`.
    pub fn solve_refined(&self, a: &BlockCsr, rhs: &[f64]) -> Vec<f64> {
        let mut x = self.solve(rhs);
        let mut ax = vec![0.0; x.len()];
        a.mul_vec(&x, &mut ax);
        let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, v)| b - v).collect();
        let dx = self.solve(&r);
        x.iter_mut().zip(&dx).for_each(|(v, d)| *v += d);
        x
    }
}

/// Factors the closed subtree `lo..=hi` into `panel` (its slice of the
/// panel storage) and returns the update matrix of the root `hi`.
fn factor_range(
    sym: &Symbolic,
    a: &BlockCsr,
    lo: usize,
    hi: usize,
    panel: &mut [f64],
    work: &mut FrontWork,
) -> Result<(usize, Vec<f64>), (usize, usize)> {
    let base = sym.panel_ptr[lo];
    let mut updates: Vec<Option<Vec<f64>>> = vec![None; hi + 1 - lo];
    for s in lo..=hi {
        let children: Vec<Vec<f64>> =
            sym.sn_children[s].iter().map(|&c| updates[c - lo].take().expect("child factored")).collect();
        let dst = &mut panel[sym.panel_ptr[s] - base..sym.panel_ptr[s + 1] - base];
        updates[s - lo] = Some(work.factor(sym, a, s, children, dst).map_err(|c| (s, c))?);
    }
    Ok((hi, updates[hi - lo].take().expect("root factored")))
}

// ---------------------------------------------------------------------------
// Iterative path

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    for (x, y) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = a[n - n % 4..].iter().zip(&b[n - n % 4..]).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// `||b - A x|| / ||b||`, or the absolute residual when `b = 0`.
pub fn relative_residual(a: &BlockCsr, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; x.len()];
    a.mul_vec(x, &mut ax);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, v)| bi - v).collect();
    let nb = norm(b);
    if nb == 0.0 {
        norm(&r)
    } else {
        norm(&r) / nb
    }
}

/// Conjugate gradients with a block-Jacobi preconditioner.
pub fn conjugate_gradient(
    a: &BlockCsr,
    b: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize), SolveError> {
    let bs = a.block;
    let n = a.block_rows();
    // Inverted diagonal blocks through their Cholesky factors.
    let mut inv = vec![0.0; n * bs * bs];
    for r in 0..n {
        let p = a.find(r, r).expect("diagonal present");
        let dense: Vec<Vec<f64>> = (0..bs).map(|i| (0..bs).map(|j| a.block_at(p)[i * bs + j]).collect()).collect();
        let blk = BlockCsr::from_dense(1, &dense);
        let f = CholeskyFactor::new(&blk, Ordering::Natural, 1)
            .map_err(|_| SolveError::NotPositiveDefinite { pivot: r * bs })?;
        for c in 0..bs {
            let mut e = vec![0.0; bs];
            e[c] = 1.0;
            let col = f.solve(&e);
            for i in 0..bs {
                inv[r * bs * bs + i * bs + c] = col[i];
            }
        }
    }
    let precond = |r: &[f64], z: &mut [f64]| {
        for k in 0..n {
            for i in 0..bs {
                let mut acc = 0.0;
                for j in 0..bs {
                    acc += inv[k * bs * bs + i * bs + j] * r[k * bs + j];
                }
                z[k * bs + i] = acc;
            }
        }
    };
    let dim = a.dim();
    let nb = norm(b);
    let scale = if nb == 0.0 { 1.0 } else { nb };
    let mut x = vec![0.0; dim];
    let mut r = b.to_vec();
    if norm(&r) / scale <= tol {
        return Ok((x, 0));
    }
    let mut z = vec![0.0; dim];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; dim];
    for it in 1..=max_iters {
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(SolveError::NotPositiveDefinite { pivot: 0 });
        }
        let step = rz / pap;
        for i in 0..dim {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        if norm(&r) / scale <= tol {
            return Ok((x, it));
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..dim {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(SolveError::NoConvergence { iterations: max_iters, residual: norm(&r) / scale })
}

/// Result of a linear solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

pub fn solve_linear(a: &BlockCsr, b: &[f64], cfg: &SolverConfig) -> Result<Solution, SolveError> {
    cfg.validate()?;
    if b.len() != a.dim() {
        return Err(SolveError::DimensionMismatch { expected: a.dim(), got: b.len() });
    }
    if a.dim() == 0 {
        return Ok(Solution { x: Vec::new(), residual: 0.0, iterations: 0 });
    }
    match cfg.method {
        Method::DirectCholesky => {
            let f = CholeskyFactor::new(a, cfg.ordering, cfg.factor_workers)?;
            let x = f.solve_refined(a, b);
            let residual = relative_residual(a, &x, b);
            Ok(Solution { x, residual, iterations: 1 })
        }
        Method::ConjugateGradient => {
            let max = cfg.cg_max_iters.unwrap_or(10 * a.dim());
            let (x, iterations) = conjugate_gradient(a, b, cfg.cg_tolerance, max)?;
            let residual = relative_residual(a, &x, b);
            Ok(Solution { x, residual, iterations })
        }
    }
}

/// Solves an assembled system and lifts the result to all vertices.
pub fn solve(sys: &SparseSystem, cfg: &SolverConfig) -> Result<FlowState, SolveError> {
    SolverSession::new(cfg.clone())?.solve(sys)
}

/// Repeated solves on one sparsity pattern, reusing the symbolic analysis.
#[derive(Debug, Clone)]
pub struct SolverSession {
    cfg: SolverConfig,
    pattern: Option<(Vec<usize>, Vec<usize>, usize)>,
    sym: Option<Symbolic>,
}

impl SolverSession {
    pub fn new(cfg: SolverConfig) -> Result<Self, SolveError> {
        cfg.validate()?;
        Ok(Self { cfg, pattern: None, sym: None })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    fn analysis(&mut self, a: &BlockCsr, coords: Option<&[[f64; 2]]>) -> Symbolic {
        let same =
            self.pattern.as_ref().is_some_and(|(rp, ci, b)| *b == a.block && rp == &a.row_ptr && ci == &a.col_idx);
        if !same {
            self.sym = Some(Symbolic::analyze_with(a, self.cfg.ordering, self.cfg.factor_workers, coords));
            self.pattern = Some((a.row_ptr.clone(), a.col_idx.clone(), a.block));
        }
        self.sym.clone().expect("analysis present")
    }

    /// Numeric factorization of `a`.
    pub fn factor(&mut self, a: &BlockCsr) -> Result<CholeskyFactor, SolveError> {
        self.factor_with(a, None)
    }

    /// Numeric factorization of `a`, ordering by the block-row positions
    /// `coords` when the pattern is analysed afresh.
    pub fn factor_with(&mut self, a: &BlockCsr, coords: Option<&[[f64; 2]]>) -> Result<CholeskyFactor, SolveError> {
        let sym = self.analysis(a, coords);
        CholeskyFactor::with_symbolic(sym, a, self.cfg.factor_workers)
    }

    pub fn solve_linear(&mut self, a: &BlockCsr, b: &[f64]) -> Result<Solution, SolveError> {
        self.solve_linear_with(a, b, None)
    }

    fn solve_linear_with(
        &mut self,
        a: &BlockCsr,
        b: &[f64],
        coords: Option<&[[f64; 2]]>,
    ) -> Result<Solution, SolveError> {
        if self.cfg.method == Method::ConjugateGradient || a.dim() == 0 || b.len() != a.dim() {
            return solve_linear(a, b, &self.cfg);
        }
        let f = self.factor_with(a, coords)?;
        let x = f.solve_refined(a, b);
        let residual = relative_residual(a, &x, b);
        Ok(Solution { x, residual, iterations: 1 })
    }

    pub fn solve(&mut self, sys: &SparseSystem) -> Result<FlowState, SolveError> {
        let sol = self.solve_linear_with(sys.matrix(), sys.rhs(), Some(sys.coordinates()))?;
        Ok(sys.expand(&sol.x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random sparse SPD: random symmetric sparse pattern, diagonal dominance.
    pub(crate) fn random_spd(n_blocks: usize, block: usize, density: f64, seed: u64) -> BlockCsr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_blocks * block;
        let mut d = vec![vec![0.0f64; n]; n];
        for i in 0..n_blocks {
            for j in 0..i {
                if rng.gen::<f64>() < density {
                    for r in 0..block {
                        for c in 0..block {
                            let v = rng.gen_range(-1.0..1.0);
                            d[i * block + r][j * block + c] = v;
                            d[j * block + c][i * block + r] = v;
                        }
                    }
                }
            }
            for r in 0..block {
                for c in 0..r {
                    let v = rng.gen_range(-0.3..0.3);
                    d[i * block + r][i * block + c] = v;
                    d[i * block + c][i * block + r] = v;
                }
            }
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| d[i][j].abs()).sum();
            d[i][i] = off + rng.gen_range(0.1..1.0);
        }
        BlockCsr::from_dense(block, &d)
    }

    fn grid_laplacian(w: usize, h: usize, shift: f64) -> BlockCsr {
        let n = w * h;
        let mut d = vec![vec![0.0f64; n]; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                d[i][i] = shift;
                let mut link = |j: usize| {
                    d[i][j] -= 1.0;
                    d[i][i] += 1.0;
                };
                if x + 1 < w {
                    link(i + 1);
                }
                if x > 0 {
                    link(i - 1);
                }
                if y + 1 < h {
                    link(i + w);
                }
                if y > 0 {
                    link(i - w);
                }
            }
        }
        BlockCsr::from_dense(1, &d)
    }

    fn is_permutation(p: &[usize]) -> bool {
        let mut seen = vec![false; p.len()];
        p.iter().all(|&v| v < p.len() && !std::mem::replace(&mut seen[v], true))
    }

    #[test]
    fn orderings_are_permutations() {
        let a = grid_laplacian(17, 13, 0.1);
        let adj = a.adjacency();
        assert!(is_permutation(&nested_dissection(&adj)));
        assert!(is_permutation(&reverse_cuthill_mckee(&adj)));
        // Disconnected graph.
        let b = random_spd(90, 1, 0.01, 3);
        assert!(is_permutation(&nested_dissection(&b.adjacency())));
        assert!(is_permutation(&reverse_cuthill_mckee(&b.adjacency())));
    }

    #[test]
    fn nested_dissection_reduces_fill() {
        let a = grid_laplacian(40, 40, 0.01);
        let nd = Symbolic::analyze(&a, Ordering::NestedDissection, 1).nnz_blocks();
        let rcm = Symbolic::analyze(&a, Ordering::ReverseCuthillMcKee, 1).nnz_blocks();
        let nat = Symbolic::analyze(&a, Ordering::Natural, 1).nnz_blocks();
        assert!(nd < rcm && rcm <= nat, "nd {nd} rcm {rcm} natural {nat}");
    }

    #[test]
    fn coordinate_dissection_orders_grids() {
        let (w, h) = (40, 23);
        let a = grid_laplacian(w, h, 0.01);
        let coords: Vec<[f64; 2]> = (0..w * h).map(|v| [(v % w) as f64, (v / w) as f64]).collect();
        let perm = coordinate_dissection(&a.adjacency(), &coords);
        assert!(is_permutation(&perm));
        // The first cut is the middle column, ordered last.
        let tail: Vec<usize> = perm[perm.len() - h..].iter().map(|&v| v % w).collect();
        assert!(tail.iter().all(|&x| x == w / 2), "{tail:?}");
        let geo = Symbolic::analyze_with(&a, Ordering::NestedDissection, 1, Some(&coords)).nnz_blocks();
        let rcm = Symbolic::analyze(&a, Ordering::ReverseCuthillMcKee, 1).nnz_blocks();
        assert!(geo < rcm, "coordinates {geo} rcm {rcm}");
        let b: Vec<f64> = (0..w * h).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = CholeskyFactor::with_symbolic(
            Symbolic::analyze_with(&a, Ordering::NestedDissection, 1, Some(&coords)),
            &a,
            1,
        )
        .unwrap();
        assert!(relative_residual(&a, &f.solve(&b), &b) < 1e-12);
    }

    #[test]
    fn diagonal_system() {
        let d = vec![vec![4.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 0.5]];
        let a = BlockCsr::from_dense(1, &d);
        let sol = solve_linear(&a, &[1.0, 1.0, 1.0], &SolverConfig::default()).unwrap();
        assert_eq!(sol.x, vec![0.25, 0.5, 2.0]);
    }

    #[test]
    fn factor_matches_dense_cholesky() {
        for block in 1..=3 {
            let a = random_spd(40, block, 0.1, 10 + block as u64);
            let f = CholeskyFactor::new(&a, Ordering::NestedDissection, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let b: Vec<f64> = (0..a.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = f.solve(&b);
            assert!(relative_residual(&a, &x, &b) < 1e-12);
        }
    }

    #[test]
    fn residual_contract_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let block = 1 + case % 3;
            let n_blocks = rng.gen_range(2..=300 / block);
            let a = random_spd(n_blocks, block, rng.gen_range(0.005..0.05), case as u64);
            let b: Vec<f64> = (0..a.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let direct = solve_linear(&a, &b, &SolverConfig::default()).unwrap();
            assert!(direct.residual <= 1e-10, "case {case}: {}", direct.residual);
            let cg_cfg = SolverConfig { method: Method::ConjugateGradient, ..Default::default() };
            let cg = solve_linear(&a, &b, &cg_cfg).unwrap();
            assert!(cg.residual <= 1e-10);
            let diff = norm(&direct.x.iter().zip(&cg.x).map(|(p, q)| p - q).collect::<Vec<_>>());
            assert!(diff <= 1e-8 * norm(&direct.x), "case {case}");
        }
    }

    #[test]
    fn worker_count_does_not_change_factor() {
        let a = grid_laplacian(45, 40, 0.05);
        let one = CholeskyFactor::new(&a, Ordering::NestedDissection, 1).unwrap();
        let four = CholeskyFactor::new(&a, Ordering::NestedDissection, 4).unwrap();
        assert!(!four.symbolic().task_ranges().is_empty());
        assert_eq!(one.symbolic().perm(), four.symbolic().perm());
        assert_eq!(one.panels, four.panels);
    }

    #[test]
    fn task_ranges_are_closed_subtrees() {
        let a = grid_laplacian(60, 50, 0.05);
        let sym = Symbolic::analyze(&a, Ordering::NestedDissection, 4);
        let tasks = sym.task_ranges();
        assert!(tasks.len() >= 2);
        for w in tasks.windows(2) {
            assert!(w[0].1 < w[1].0);
        }
        for &(lo, hi) in tasks {
            // Every supernode in the range has its parent in the range, except the root.
            for s in lo..hi {
                assert!(sym.sn_parent[s] > s && sym.sn_parent[s] <= hi);
            }
        }
    }

    #[test]
    fn indefinite_matrix_reports_pivot() {
        let d = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let a = BlockCsr::from_dense(1, &d);
        let err = solve_linear(&a, &[1.0, 0.0], &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolveError::NotPositiveDefinite { .. }));
    }

    #[test]
    fn cg_reports_non_convergence() {
        let a = grid_laplacian(20, 20, 1e-4);
        let b = vec![1.0; a.dim()];
        let cfg = SolverConfig { method: Method::ConjugateGradient, cg_max_iters: Some(3), ..Default::default() };
        match solve_linear(&a, &b, &cfg) {
            Err(SolveError::NoConvergence { iterations: 3, residual }) => assert!(residual > 1e-10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        let a = grid_laplacian(3, 3, 1.0);
        let b = vec![0.0; 9];
        for cfg in [
            SolverConfig { cg_tolerance: 0.0, ..Default::default() },
            SolverConfig { cg_tolerance: 1.5, ..Default::default() },
            SolverConfig { factor_workers: 0, ..Default::default() },
            SolverConfig { cg_max_iters: Some(0), ..Default::default() },
        ] {
            assert!(matches!(solve_linear(&a, &b, &cfg), Err(SolveError::InvalidConfig(_))));
        }
        assert!(matches!(
            solve_linear(&a, &[0.0; 4], &SolverConfig::default()),
            Err(SolveError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = grid_laplacian(6, 6, 0.5);
        let sol = solve_linear(&a, &[0.0; 36], &SolverConfig::default()).unwrap();
        assert!(sol.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn session_reuses_analysis_across_values() {
        let a = grid_laplacian(12, 12, 0.5);
        let scaled = BlockCsr::new(1, a.row_ptr.clone(), a.col_idx.clone(), a.values.iter().map(|v| 2.0 * v).collect());
        let b: Vec<f64> = (0..a.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut session = SolverSession::new(SolverConfig::default()).unwrap();
        let x1 = session.solve_linear(&a, &b).unwrap().x;
        let x2 = session.solve_linear(&scaled, &b).unwrap().x;
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - 2.0 * q).abs() < 1e-10);
        }
        let other = grid_laplacian(5, 7, 1.0);
        let sol = session.solve_linear(&other, &vec![1.0; 35]).unwrap();
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn asymmetry_detection() {
        let d = vec![vec![2.0, 1.0], vec![0.5, 2.0]];
        assert_eq!(BlockCsr::from_dense(1, &d).max_asymmetry(), 0.5);
    }
}
