//! Problem instances: the measurement graph, its connection Laplacian, the
//! three assignment types and the objective in trace and edge-sum form.

use std::collections::HashSet;

use log::warn;
use nalgebra::DMatrix;

use crate::error::{invalid, Result, ShonanError};
use crate::manifold::{self, Rotation, StiefelPoint};

/// One relative measurement `R̄_ij ≈ R_iᵀ R_j` with concentration `κ_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub i: usize,
    pub j: usize,
    pub rotation: Rotation,
    pub kappa: f64,
}

/// A validated rotation-averaging instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementGraph {
    n: usize,
    d: usize,
    edges: Vec<Measurement>,
}

impl MeasurementGraph {
    /// Builds the graph, rejecting self loops, duplicate unordered pairs,
    /// negative weights and graphs that are disconnected over `κ > 0` edges.
    pub fn new(n: usize, d: usize, edges: Vec<Measurement>) -> Result<Self> {
        if !(d == 2 || d == 3) {
            return Err(invalid(format!("base dimension must be 2 or 3, got {d}")));
        }
        if n == 0 {
            return Err(invalid("graph needs at least one node"));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut zero_weight = 0usize;
        let mut dsu = DisjointSets::new(n);
        for (k, e) in edges.iter().enumerate() {
            if e.i >= n || e.j >= n {
                return Err(invalid(format!(
                    "edge {k}: node id out of range ({}, {}) for n = {n}",
                    e.i, e.j
                )));
            }
            if e.i == e.j {
                return Err(invalid(format!("edge {k}: self loop on node {}", e.i)));
            }
            if !(e.kappa >= 0.0) || !e.kappa.is_finite() {
                return Err(invalid(format!(
                    "edge {k}: weight must be finite and >= 0, got {}",
                    e.kappa
                )));
            }
            if e.rotation.dim() != d {
                return Err(invalid(format!(
                    "edge {k}: measurement is SO({}), graph is SO({d})",
                    e.rotation.dim()
                )));
            }
            if !seen.insert((e.i.min(e.j), e.i.max(e.j))) {
                return Err(invalid(format!(
                    "edge {k}: duplicate measurement between {} and {}",
                    e.i, e.j
                )));
            }
            if e.kappa > 0.0 {
                dsu.union(e.i, e.j);
            } else {
                zero_weight += 1;
            }
        }
        if zero_weight > 0 {
            warn!("{zero_weight} measurement(s) have zero weight and contribute nothing");
        }
        let components = dsu.components();
        if components > 1 {
            return Err(invalid(format!(
                "measurement graph is disconnected ({components} components over κ > 0 edges)"
            )));
        }
        Ok(Self { n, d, edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn edges(&self) -> &[Measurement] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Σ κ_ij.
    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.kappa).sum()
    }

    pub fn max_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.kappa).fold(0.0, f64::max)
    }
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }

    fn components(&mut self) -> usize {
        (0..self.parent.len()).filter(|&x| self.find(x) == x).count()
    }
}

/// Sparse symmetric matrix stored as b×b blocks: all diagonal blocks plus one
/// copy of every off-diagonal pair `(i, j)`; block `(j, i)` is its transpose.
#[derive(Debug, Clone)]
pub struct BlockSparseSymmetric {
    n: usize,
    block: usize,
    diagonal: Vec<DMatrix<f64>>,
    off_diagonal: Vec<(usize, usize, DMatrix<f64>)>,
}

impl BlockSparseSymmetric {
    pub fn new(
        n: usize,
        block: usize,
        diagonal: Vec<DMatrix<f64>>,
        off_diagonal: Vec<(usize, usize, DMatrix<f64>)>,
    ) -> Result<Self> {
        if diagonal.len() != n {
            return Err(invalid("one diagonal block per node required"));
        }
        let bad_shape = |m: &DMatrix<f64>| m.nrows() != block || m.ncols() != block;
        if diagonal.iter().any(bad_shape) || off_diagonal.iter().any(|(_, _, m)| bad_shape(m)) {
            return Err(invalid(format!("all blocks must be {block}x{block}")));
        }
        if off_diagonal.iter().any(|&(i, j, _)| i >= n || j >= n || i == j) {
            return Err(invalid("off-diagonal block index out of range"));
        }
        Ok(Self {
            n,
            block,
            diagonal,
            off_diagonal,
        })
    }

    pub fn num_block_rows(&self) -> usize {
        self.n
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    /// Total dimension `n·b`.
    pub fn dim(&self) -> usize {
        self.n * self.block
    }

    pub fn diagonal_blocks(&self) -> &[DMatrix<f64>] {
        &self.diagonal
    }

    pub fn off_diagonal_blocks(&self) -> &[(usize, usize, DMatrix<f64>)] {
        &self.off_diagonal
    }

    /// Number of nonzero blocks of the full symmetric matrix, `n + 2m`.
    pub fn stored_blocks(&self) -> usize {
        self.n + 2 * self.off_diagonal.len()
    }

    /// Sorted list of the `(row, col)` block positions of the full matrix.
    pub fn block_pattern(&self) -> Vec<(usize, usize)> {
        let mut pattern: Vec<(usize, usize)> = (0..self.n).map(|i| (i, i)).collect();
        for &(i, j, _) in &self.off_diagonal {
            pattern.push((i, j));
            pattern.push((j, i));
        }
        pattern.sort_unstable();
        pattern
    }

    /// `y = A x`.
    pub fn multiply(&self, x: &[f64], y: &mut [f64]) {
        let b = self.block;
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, m) in self.diagonal.iter().enumerate() {
            gemv_add(m, &x[i * b..(i + 1) * b], &mut y[i * b..(i + 1) * b], false);
        }
        for (i, j, m) in &self.off_diagonal {
            let (i, j) = (*i, *j);
            let (xi, xj) = (&x[i * b..(i + 1) * b], &x[j * b..(j + 1) * b]);
            gemv_add(m, xj, &mut y[i * b..(i + 1) * b], false);
            gemv_add(m, xi, &mut y[j * b..(j + 1) * b], true);
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let b = self.block;
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (i, m) in self.diagonal.iter().enumerate() {
            out.view_mut((i * b, i * b), (b, b)).copy_from(m);
        }
        for (i, j, m) in &self.off_diagonal {
            out.view_mut((i * b, j * b), (b, b)).copy_from(m);
            out.view_mut((j * b, i * b), (b, b)).copy_from(&m.transpose());
        }
        out
    }
}

/// `y += M x` (or `Mᵀ x`) for a small dense block.
#[inline]
pub(crate) fn gemv_add(m: &DMatrix<f64>, x: &[f64], y: &mut [f64], transpose: bool) {
    let (r, c) = m.shape();
    let data = m.as_slice();
    if transpose {
        for (col, yc) in y.iter_mut().enumerate().take(c) {
            let column = &data[col * r..(col + 1) * r];
            *yc += column.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    } else {
        for (col, &xc) in x.iter().enumerate().take(c) {
            if xc == 0.0 {
                continue;
            }
            let column = &data[col * r..(col + 1) * r];
            for (yr, a) in y.iter_mut().zip(column) {
                *yr += a * xc;
            }
        }
    }
}

/// The connection Laplacian `L̄`: block `(i,i) = (Σ_{j~i} κ_ij) I_d`,
/// block `(i,j) = −κ_ij R̄_ij`, block `(j,i) = −κ_ij R̄_ijᵀ`.
#[derive(Debug, Clone)]
pub struct ConnectionLaplacian {
    d: usize,
    matrix: BlockSparseSymmetric,
}

impl ConnectionLaplacian {
    pub fn n(&self) -> usize {
        self.matrix.num_block_rows()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> &BlockSparseSymmetric {
        &self.matrix
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.matrix.to_dense()
    }
}

pub fn build_connection_laplacian(g: &MeasurementGraph) -> ConnectionLaplacian {
    let (n, d) = (g.n(), g.d());
    let mut degree = vec![0.0; n];
    let mut off = Vec::with_capacity(g.num_edges());
    for e in g.edges() {
        degree[e.i] += e.kappa;
        degree[e.j] += e.kappa;
        off.push((e.i, e.j, e.rotation.matrix() * (-e.kappa)));
    }
    let diagonal = degree.into_iter().map(|w| DMatrix::identity(d, d) * w).collect();
    let matrix =
        BlockSparseSymmetric::new(n, d, diagonal, off).expect("graph invariants guarantee a well-formed Laplacian");
    ConnectionLaplacian { d, matrix }
}

/// Anything that can be viewed as a p×dn factor made of p×d blocks.
pub trait Factor {
    fn rows(&self) -> usize;
    fn block_cols(&self) -> usize;
    fn num_blocks(&self) -> usize;
    fn block(&self, i: usize) -> &DMatrix<f64>;

    /// The concatenated p×dn matrix.
    fn to_matrix(&self) -> DMatrix<f64> {
        let (p, d, n) = (self.rows(), self.block_cols(), self.num_blocks());
        let mut out = DMatrix::zeros(p, d * n);
        for i in 0..n {
            out.view_mut((0, i * d), (p, d)).copy_from(self.block(i));
        }
        out
    }
}

/// R = (R_1, …, R_n) ∈ SO(d)^n.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationAssignment {
    d: usize,
    blocks: Vec<Rotation>,
}

impl RotationAssignment {
    pub fn new(blocks: Vec<Rotation>) -> Result<Self> {
        let d = blocks
            .first()
            .map(Rotation::dim)
            .ok_or_else(|| invalid("empty assignment"))?;
        if blocks.iter().any(|b| b.dim() != d) {
            return Err(invalid("rotation blocks have mixed dimensions"));
        }
        Ok(Self { d, blocks })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Rotation] {
        &self.blocks
    }

    /// Embeds each block as the trivial Stiefel factor `[R_i; 0] ∈ St(d, p)`.
    pub fn embed(&self, p: usize) -> Result<StiefelAssignment> {
        if p < self.d {
            return Err(invalid(format!("cannot embed SO({}) blocks in {p} rows", self.d)));
        }
        let blocks = self
            .blocks
            .iter()
            .map(|r| {
                let mut m = DMatrix::zeros(p, self.d);
                m.view_mut((0, 0), (self.d, self.d)).copy_from(r.matrix());
                StiefelPoint::from_matrix_unchecked(m)
            })
            .collect();
        Ok(StiefelAssignment { p, d: self.d, blocks })
    }
}

impl Factor for RotationAssignment {
    fn rows(&self) -> usize {
        self.d
    }
    fn block_cols(&self) -> usize {
        self.d
    }
    fn num_blocks(&self) -> usize {
        self.blocks.len()
    }
    fn block(&self, i: usize) -> &DMatrix<f64> {
        self.blocks[i].matrix()
    }
}

/// S = (S_1, …, S_n) ∈ St(d, p)^n.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelAssignment {
    p: usize,
    d: usize,
    blocks: Vec<StiefelPoint>,
}

impl StiefelAssignment {
    pub fn new(blocks: Vec<StiefelPoint>) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| invalid("empty assignment"))?;
        let (p, d) = (first.p(), first.d());
        if blocks.iter().any(|b| b.p() != p || b.d() != d) {
            return Err(invalid("Stiefel blocks have mixed dimensions"));
        }
        Ok(Self { p, d, blocks })
    }

    /// Splits a p×dn matrix into validated p×d blocks.
    pub fn from_matrix(m: &DMatrix<f64>, d: usize) -> Result<Self> {
        if d == 0 || !m.ncols().is_multiple_of(d) {
            return Err(invalid(format!("{} columns is not a multiple of d = {d}", m.ncols())));
        }
        let blocks = (0..m.ncols() / d)
            .map(|i| StiefelPoint::from_matrix(m.columns(i * d, d).into_owned()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[StiefelPoint] {
        &self.blocks
    }
}

impl Factor for StiefelAssignment {
    fn rows(&self) -> usize {
        self.p
    }
    fn block_cols(&self) -> usize {
        self.d
    }
    fn num_blocks(&self) -> usize {
        self.blocks.len()
    }
    fn block(&self, i: usize) -> &DMatrix<f64> {
        self.blocks[i].matrix()
    }
}

/// Q = (Q_1, …, Q_n) ∈ SO(p)^n, the staircase iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedAssignment {
    p: usize,
    blocks: Vec<Rotation>,
}

impl LiftedAssignment {
    pub fn new(blocks: Vec<Rotation>) -> Result<Self> {
        let p = blocks
            .first()
            .map(Rotation::dim)
            .ok_or_else(|| invalid("empty assignment"))?;
        if blocks.iter().any(|b| b.dim() != p) {
            return Err(invalid("rotation blocks have mixed dimensions"));
        }
        Ok(Self { p, blocks })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Rotation] {
        &self.blocks
    }

    /// Π(Q): first d columns of every block.
    pub fn project(&self, d: usize) -> Result<StiefelAssignment> {
        let blocks = self
            .blocks
            .iter()
            .map(|q| manifold::project_to_stiefel(q, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(StiefelAssignment { p: self.p, d, blocks })
    }

    /// Every block mapped to `block-diag(Q_i, 1)`.
    pub fn lift(&self) -> LiftedAssignment {
        LiftedAssignment {
            p: self.p + 1,
            blocks: self.blocks.iter().map(manifold::lift_rotation).collect(),
        }
    }

    /// Blockwise `Q_i exp(hat(δ_i))` with `δ` stacked node by node.
    pub fn retract(&self, delta: &[f64]) -> Result<LiftedAssignment> {
        let k = manifold::tangent_dim(self.p);
        if delta.len() != k * self.n() {
            return Err(invalid(format!(
                "tangent has {} entries, expected {}",
                delta.len(),
                k * self.n()
            )));
        }
        Ok(LiftedAssignment {
            p: self.p,
            blocks: self
                .blocks
                .iter()
                .zip(delta.chunks(k))
                .map(|(q, v)| manifold::retract_slice(q, v))
                .collect(),
        })
    }

    /// `Q_i ← G Q_i` for all i.
    pub fn left_multiply(&self, g: &Rotation) -> Result<LiftedAssignment> {
        let blocks = self.blocks.iter().map(|q| g.compose(q)).collect::<Result<Vec<_>>>()?;
        LiftedAssignment::new(blocks)
    }

    /// Embeds an SO(d)^n assignment at level p ≥ d via repeated `block-diag(·, 1)`.
    pub fn from_rotations(r: &RotationAssignment, p: usize) -> Result<LiftedAssignment> {
        if p < r.d() {
            return Err(invalid(format!("cannot lift SO({}) to SO({p})", r.d())));
        }
        let blocks = r
            .blocks()
            .iter()
            .map(|b| {
                let mut m = DMatrix::identity(p, p);
                m.view_mut((0, 0), (r.d(), r.d())).copy_from(b.matrix());
                Rotation::from_matrix_unchecked(m)
            })
            .collect();
        Ok(LiftedAssignment { p, blocks })
    }
}

fn check_factor(l: &ConnectionLaplacian, s: &impl Factor) -> Result<()> {
    if s.num_blocks() != l.n() || s.block_cols() != l.d() {
        return Err(invalid(format!(
            "factor has {} blocks of width {}, Laplacian has {} blocks of width {}",
            s.num_blocks(),
            s.block_cols(),
            l.n(),
            l.d()
        )));
    }
    Ok(())
}

/// `tr(L̄ SᵀS)`, evaluated blockwise.
pub fn cost(l: &ConnectionLaplacian, s: &impl Factor) -> Result<f64> {
    check_factor(l, s)?;
    let m = l.matrix();
    let mut total = 0.0;
    for (i, diag) in m.diagonal_blocks().iter().enumerate() {
        let si = s.block(i);
        total += (diag * (si.transpose() * si)).trace();
    }
    for (i, j, block) in m.off_diagonal_blocks() {
        let cross = s.block(*j).transpose() * s.block(*i);
        total += 2.0 * (block * cross).trace();
    }
    Ok(total)
}

/// `Σ κ_ij ‖S_j − S_i R̄_ij‖²_F`, the edge-sum form of [`cost`].
pub fn edge_cost(g: &MeasurementGraph, s: &impl Factor) -> Result<f64> {
    if s.num_blocks() != g.n() || s.block_cols() != g.d() {
        return Err(invalid("factor does not match the graph"));
    }
    Ok(g.edges()
        .iter()
        .map(|e| e.kappa * (s.block(e.j) - s.block(e.i) * e.rotation.matrix()).norm_squared())
        .sum())
}

/// `f̃(Q) = tr(L̄ Π(Q)ᵀ Π(Q))`.
pub fn cost_lifted(l: &ConnectionLaplacian, q: &LiftedAssignment) -> Result<f64> {
    cost(l, &q.project(l.d())?)
}

/// Edge-sum evaluation of `f̃(Q)` straight from the rotation blocks.
pub fn edge_cost_lifted(g: &MeasurementGraph, q: &LiftedAssignment) -> f64 {
    let d = g.d();
    g.edges()
        .iter()
        .map(|e| {
            let si = q.blocks[e.i].matrix().columns(0, d);
            let sj = q.blocks[e.j].matrix().columns(0, d);
            e.kappa * (sj - si * e.rotation.matrix()).norm_squared()
        })
        .sum()
}

/// Upper bound `f_R − f_SDP` on the suboptimality of a feasible estimate.
pub fn suboptimality_gap(f_r: f64, f_sdp: f64) -> Result<f64> {
    let gap = f_r - f_sdp;
    if gap < -1e-6 * f_sdp.abs().max(1.0) {
        return Err(ShonanError::InternalInconsistency(format!(
            "estimate cost {f_r} is below the certified lower bound {f_sdp}"
        )));
    }
    Ok(gap.max(0.0))
}
